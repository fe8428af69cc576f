// regenerate the speech_encode golden snapshot values
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use stlab_core::nn::{speech_encode, ModelConfig, ModelParams};
use stlab_core::tensor::Tensor;

fn main() {
    let config = ModelConfig {
        vocab_size: 12, d_model: 8, n_heads: 2, n_enc_layers: 2, n_dec_layers: 1,
        ffn_dim: 16, dropout: 0.0, feature_dim: 4, conv_kernel: 5, conv_stride: 2, max_len: 64,
    };
    let params = ModelParams::init(&config, 7).unwrap();
    let s = {
        let mut r = ChaCha20Rng::seed_from_u64(11);
        Tensor::from_vec(&[12, 4], (0..48).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let a = speech_encode(&s, &params, &config, false, None, &mut rng).unwrap();
    println!("shape {:?}", a.shape());
    for v in a.to_vec().iter().take(8) {
        println!("{:.16e},", v);
    }
}
