use ndarray::{Array1, ArrayView1};

use super::layers::{gelu, gelu_grad};
use super::ModelParams;
use crate::error::{Error, Result};

pub struct ImageTrace {
    input: Array1<f64>,
    pre: Array1<f64>,
    act: Array1<f64>,
}

impl ModelParams {
    pub(crate) fn image_forward(&self, x: &[f64]) -> Result<(Array1<f64>, ImageTrace)> {
        if x.len() != self.config.image_input_dim {
            return Err(Error::Shape(format!(
                "image vector has {} values, encoder expects {}",
                x.len(),
                self.config.image_input_dim
            )));
        }
        let input = Array1::from(x.to_vec());
        let pre = self.image.fc_in.forward_vec(input.view());
        let act = pre.mapv(gelu);
        let out = self.image.fc_out.forward_vec(act.view());
        Ok((out, ImageTrace { input, pre, act }))
    }

    pub(crate) fn image_backward(&self, trace: &ImageTrace, d_out: ArrayView1<f64>, grads: &mut ModelParams) {
        let mut d_act = self
            .image
            .fc_out
            .backward_vec(trace.act.view(), d_out, &mut grads.image.fc_out);
        d_act.zip_mut_with(&trace.pre, |d, &x| *d *= gelu_grad(x));
        self.image
            .fc_in
            .backward_vec(trace.input.view(), d_act.view(), &mut grads.image.fc_in);
    }
}

#[cfg(test)]
mod tests {
    use super::super::EncoderConfig;
    use super::*;
    use ndarray::{concatenate, Array2, Axis};

    fn params(dim: usize, p: usize) -> ModelParams {
        let mut c = EncoderConfig::new(8, dim);
        c.embed_dim = p;
        c.heads = 1;
        c.hidden = 2 * dim;
        c.adapter_bottleneck = 1;
        ModelParams::init(c, 5).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let p = params(4, 4);
        assert!(p.encode_image(&[0.0; 4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paired_identity_weights_pass_input_through() {
        // hidden = [x; -x], out = gelu(x) - gelu(-x) = x
        let (dim, pdim) = (6, 4);
        let mut p = params(dim, pdim);
        let eye = Array2::<f64>::eye(dim);
        p.image.fc_in.weight = concatenate(Axis(0), &[eye.view(), (-&eye).view()]).unwrap();
        let pick = Array2::from_shape_fn((pdim, dim), |(i, j)| if i == j { 1.0 } else { 0.0 });
        p.image.fc_out.weight = concatenate(Axis(1), &[pick.view(), (-&pick).view()]).unwrap();
        let x = [0.3, -1.2, 2.0, 0.0, 5.0, -7.0];
        let y = p.encode_image(&x).unwrap();
        for i in 0..pdim {
            assert!((y[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dimension_is_an_error() {
        let p = params(4, 4);
        assert!(matches!(p.encode_image(&[1.0; 3]), Err(Error::Shape(_))));
    }
}
