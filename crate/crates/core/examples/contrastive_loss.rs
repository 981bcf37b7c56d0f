//! Evaluate the bidirectional contrastive loss on a small batch where two
//! pairs share a label, and on the two-item identity batch.
//!
//! cargo run --example contrastive_loss

use klite::contrastive::{unicl_loss, unicl_loss_with_grad, Batch, PositiveSets};
use ndarray::{array, Array2};

fn main() -> klite::Result<()> {
    let images = array![[1.0, 0.1, 0.0], [0.0, 1.0, 0.2], [0.9, 0.0, 0.3], [0.1, 0.2, 1.0]];
    let texts = array![[0.8, 0.2, 0.1], [0.1, 0.9, 0.0], [1.0, 0.0, 0.2], [0.0, 0.3, 0.9]];
    let labels = vec![0, 1, 0, 2];
    println!("positives of 0: {:?}", PositiveSets::from_labels(&labels).of(0));

    let batch = Batch::new(images, texts, labels.clone())?;
    for scale in [1.0, 14.29, 100.0] {
        let l = batch.loss(scale)?;
        println!("scale {scale:>6}: i2t {:.4}  t2i {:.4}  total {:.4}", l.i2t, l.t2i, l.total);
    }

    let eye = Array2::<f64>::eye(2);
    println!("distinct labels: {:.5}", unicl_loss(&eye, &[0, 1], 1.0)?.total);
    println!("shared label i2t: {:.5}", unicl_loss(&eye, &[0, 0], 1.0)?.i2t);

    let (terms, d_sim, d_scale) = unicl_loss_with_grad(&eye, &[0, 1], 1.0)?;
    println!("loss {:.5}, dL/dsim\n{d_sim:.4}\ndL/dscale {d_scale:.4}", terms.total);
    Ok(())
}
