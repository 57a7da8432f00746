//! The gradient reversal layer: identity forward, gradient scaled by -λ on
//! the way back. A tiny logistic probe shows the sign flip numerically.

use ndarray::array;
use sada::autograd::Graph;

fn main() {
    for lambda in [0.0, 0.5, 1.0] {
        let mut g = Graph::new();
        let x = g.leaf(array![[0.3, -1.2, 0.8]]);
        let w = g.leaf(array![[0.5], [0.1], [-0.7]]);
        let plain = g.matmul(x, w);
        let reversed_x = g.grad_reverse(x, lambda);
        let through = g.matmul(reversed_x, w);
        let a = g.sigmoid(plain);
        let b = g.sigmoid(through);
        let ga = g.backward(a);
        let gb = g.backward(b);
        println!(
            "λ={lambda}: forward equal: {}, dx plain {:?}, dx reversed {:?}",
            g.value(a) == g.value(b),
            ga.get(x).unwrap().row(0).to_vec(),
            gb.get(x).unwrap().row(0).to_vec()
        );
    }
}
