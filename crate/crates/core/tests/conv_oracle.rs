use fsq::tensor::matmul;
use fsq::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
}

#[test]
fn conv_matches_naive_loops_on_every_small_shape() {
    let cases = fsq_oracle::checks::conv_exhaustive().unwrap_or_else(|e| panic!("{e}"));
    assert!(cases > 15_000, "only {cases} cases");
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let got = matmul(&a, &b).unwrap();
        let want = fsq_oracle::matmul_f32(&a, &b);
        prop_assert_eq!(got, want);
    }
}
