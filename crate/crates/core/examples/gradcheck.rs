//! Checks analytic gradients of an encoded MLP against central finite
//! differences, for both its parameters and its input.
//!
//! `cargo run --example gradcheck`

use avatar_core::diffkernel::gradcheck::{check_input, check_params};
use avatar_core::diffkernel::{positional_encode, Activation, Graph, KernelError, Mlp, OutputInit, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(
        &mut store,
        "demo",
        "demo",
        &[27, 32, 32, 4],
        Activation::Softplus,
        Activation::Sigmoid,
        OutputInit::default(),
        &mut rng,
    )?;
    let x = Tensor::new(vec![16, 3], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let loss = |g: &mut Graph<f64>, input: Var| -> Result<Var, KernelError> {
        let enc = positional_encode(g, input, 4, true)?;
        let y = mlp.apply(g, &store, enc)?;
        let sq = g.square(y)?;
        Ok(g.mean(sq))
    };
    let params = check_params(&store, &mlp.params(), 1e-6, 8, &mut rng, |g| {
        let input = g.constant(x.clone())?;
        loss(g, input)
    })?;
    let input = check_input(&x, 1e-6, loss)?;
    for (what, r) in [("parameters", params), ("input", input)] {
        println!(
            "{what:10} checked {:3} coordinates, max relative error {:.2e}, kinks skipped {}",
            r.checked, r.max_relative_error, r.kinks
        );
    }
    Ok(())
}
