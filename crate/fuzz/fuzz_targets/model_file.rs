#![no_main]

use bcpi::model_io::{decode_model, encode_model};
use bcpi::Matrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_model(data) {
        let mut out = Vec::new();
        encode_model(&mut out, &model).unwrap();
        assert_eq!(decode_model(&out).unwrap(), model);
        let x = Matrix::zeros(2, model.n_features);
        for l in &model.fit.learners {
            assert_eq!(l.predict(&x).unwrap().len(), 2);
        }
    }
});
