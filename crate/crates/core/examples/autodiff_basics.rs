//! Builds a small graph on the autodiff core, runs backward and compares
//! the gradients with central differences.
//!
//! `cargo run --example autodiff_basics`

use iaunet::tensor::gradcheck::{check_op, relative_error, STEP};
use iaunet::tensor::{matmul, no_grad};
use iaunet::Tensor;

fn main() -> iaunet::Result<()> {
    // loss = mean(sigmoid(x @ w) * x @ w)
    let x = Tensor::new(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], &[2, 3])?;
    let w = Tensor::param(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], &[3, 2])?;
    let loss_of = |w: &Tensor| -> iaunet::Result<Tensor> {
        let z = matmul(&x, w)?;
        Ok(z.sigmoid().mul(&z)?.mean())
    };
    let loss = loss_of(&w)?;
    loss.backward()?;
    println!("loss {:.6}", loss.item());
    let grad = w.grad().expect("w is a parameter").clone();

    let base = w.data().to_vec();
    for (j, &g) in grad.iter().enumerate() {
        let at = |v: f64| {
            let mut d = base.clone();
            d[j] = v;
            no_grad(|| loss_of(&Tensor::new(d, &[3, 2]).expect("shape")).map(|l| l.item()))
        };
        let numeric = (at(base[j] + STEP)? - at(base[j] - STEP)?) / (2.0 * STEP);
        println!("dw[{j}] analytic {g:+.8}  numeric {numeric:+.8}  rel err {:.1e}", relative_error(g, numeric));
    }

    // the same comparison for one op on random inputs
    let err = check_op(&[&[2, 4], &[4, 3]], 1, |t| matmul(&t[0], &t[1]));
    println!("matmul worst relative error {err:.1e}");
    Ok(())
}
