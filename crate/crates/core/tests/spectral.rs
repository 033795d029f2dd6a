//! Largest singular value of every spectrally normalized generator weight,
//! measured by a full SVD.

use candle_core::DType;
use lander_core::data::ImageShape;
use lander_core::nn::{attach_trainable, gaussian_latent, Adam, ForwardMode, GeneratorConfig, GeneratorModel};
use nalgebra::DMatrix;

const BOUND: f64 = 1.0 + 1e-2;

fn top_singular_values(generator: &GeneratorModel) -> Vec<f64> {
    generator
        .spectral_layers()
        .iter()
        .map(|layer| {
            let w = layer.normalized_weight().unwrap().to_dtype(DType::F64).unwrap();
            let out = w.dims()[0];
            let values = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let rest = values.len() / out;
            let m = DMatrix::from_row_slice(out, rest, &values);
            m.singular_values().max()
        })
        .collect()
}

#[test]
fn normalized_weights_stay_within_unit_spectral_norm() {
    let mut config = GeneratorConfig::new(ImageShape::new(3, 16, 16), 0.25);
    config.latent_dim = 32;
    let mut generator = GeneratorModel::new(config, 21, DType::F32).unwrap();
    for sigma in top_singular_values(&generator) {
        assert!(sigma <= BOUND, "after init: sigma {sigma}");
    }

    let vars = attach_trainable(&mut generator).unwrap();
    let mut adam = Adam::new(vars, 1e-2);
    for step in 0..30 {
        generator.refresh_spectral_norms().unwrap();
        let z = gaussian_latent(16, 32, step, DType::F32).unwrap();
        let out = generator.forward(&z, ForwardMode::Train).unwrap();
        let loss = out.pre_norm.affine(-1.0, 0.7).unwrap().sqr().unwrap().mean_all().unwrap();
        adam.step(&loss.backward().unwrap()).unwrap();
    }
    generator.refresh_spectral_norms().unwrap();
    for sigma in top_singular_values(&generator) {
        assert!(sigma <= BOUND, "after training: sigma {sigma}");
        assert!(sigma > 0.9, "normalization collapsed: sigma {sigma}");
    }
}
