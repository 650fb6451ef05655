//! Linear classification head and cosine-similarity head.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::heads::plugin::{Embedding, EncoderInput, EncoderPlugin};
use crate::heads::{ClassifierHead, HeadKind};
use crate::windowing::ContextualUtterance;

/// Logits as scaled cosine similarities between an embedding and per-label
/// text embeddings: `logit_i = s * cos(v, z_i)`.
pub fn similarity_logits(
    embedding: ArrayView1<'_, f64>,
    label_embeddings: &Array2<f64>,
    scale: f64,
) -> Result<Array1<f64>> {
    if label_embeddings.ncols() != embedding.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs label embedding dim {}",
            embedding.len(),
            label_embeddings.ncols()
        )));
    }
    let v_norm = embedding.dot(&embedding).sqrt();
    if v_norm == 0.0 {
        return Err(Error::invalid("zero-norm embedding in similarity head"));
    }
    let mut out = Array1::zeros(label_embeddings.nrows());
    for (i, z) in label_embeddings.rows().into_iter().enumerate() {
        let z_norm = z.dot(&z).sqrt();
        if z_norm == 0.0 {
            return Err(Error::invalid(format!(
                "zero-norm label embedding at row {i}"
            )));
        }
        out[i] = scale * embedding.dot(&z) / (v_norm * z_norm);
    }
    Ok(out)
}

/// Single linear layer over a pooled embedding: `logits = W x + b`.
///
/// Parameter layout: row-major `W` (`labels x dim`) followed by `b`.
#[derive(Debug, Clone)]
pub struct LinearHead {
    input_dim: usize,
    label_count: usize,
    params: Vec<f64>,
}

impl LinearHead {
    pub fn new(input_dim: usize, label_count: usize) -> Self {
        LinearHead {
            input_dim,
            label_count,
            params: vec![0.0; input_dim * label_count + label_count],
        }
    }

    fn pooled<'a>(&self, input: &'a Embedding) -> Result<&'a Array1<f64>> {
        match input {
            Embedding::Pooled(v) if v.len() == self.input_dim => Ok(v),
            Embedding::Pooled(v) => Err(Error::ShapeMismatch(format!(
                "linear head dim {} vs embedding dim {}",
                self.input_dim,
                v.len()
            ))),
            Embedding::Tokens(_) => Err(Error::ShapeMismatch(
                "linear head expects a pooled embedding, got tokens".into(),
            )),
        }
    }
}

impl ClassifierHead for LinearHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Linear
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn label_count(&self) -> usize {
        self.label_count
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, input: &Embedding) -> Result<Array1<f64>> {
        let x = self.pooled(input)?;
        let (d, l) = (self.input_dim, self.label_count);
        let mut out = Array1::zeros(l);
        for j in 0..l {
            let row = &self.params[j * d..(j + 1) * d];
            let mut acc = self.params[l * d + j];
            for (wk, xk) in row.iter().zip(x.iter()) {
                acc += wk * xk;
            }
            out[j] = acc;
        }
        Ok(out)
    }

    fn accumulate_grad(
        &self,
        input: &Embedding,
        grad_logits: ArrayView1<'_, f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        let x = self.pooled(input)?;
        let (d, l) = (self.input_dim, self.label_count);
        for j in 0..l {
            let g = grad_logits[j];
            if g == 0.0 {
                continue;
            }
            let row = &mut grads[j * d..(j + 1) * d];
            for (wk, xk) in row.iter_mut().zip(x.iter()) {
                *wk += g * xk;
            }
            grads[l * d + j] += g;
        }
        Ok(())
    }
}

/// Cosine-similarity head over frozen label embeddings with a learnable
/// logit scale and an optional linear adapter on the input embedding.
///
/// Raw cosine through a sigmoid spans only [0.27, 0.73], which starves BCE
/// gradients, so the scale `s` (stored as `ln s`, initialized to `ln 10`)
/// is always trainable. The adapter (`u = A v + c`, identity-initialized)
/// stands in for video-encoder fine-tuning at desk scale.
///
/// Parameter layout: `[ln_s]` then, when the adapter is enabled, row-major
/// `A` (`dim x dim`) followed by `c`.
#[derive(Debug, Clone)]
pub struct SimilarityHead {
    input_dim: usize,
    /// Frozen, unit-normalized, `labels x dim`.
    label_embeddings: Array2<f64>,
    adapter: bool,
    params: Vec<f64>,
}

impl SimilarityHead {
    pub fn new(label_embeddings: Array2<f64>, adapter: bool) -> Result<Self> {
        let dim = label_embeddings.ncols();
        if label_embeddings.nrows() == 0 || dim == 0 {
            return Err(Error::invalid("empty label embeddings"));
        }
        let mut normalized = label_embeddings;
        for mut row in normalized.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("zero-norm label embedding"));
            }
            row.mapv_inplace(|v| v / norm);
        }
        let mut params = vec![0.0; 1 + if adapter { dim * dim + dim } else { 0 }];
        params[0] = 10.0f64.ln();
        if adapter {
            for k in 0..dim {
                params[1 + k * dim + k] = 1.0;
            }
        }
        Ok(SimilarityHead {
            input_dim: dim,
            label_embeddings: normalized,
            adapter,
            params,
        })
    }

    /// Builds label embeddings by running each label text through a frozen
    /// text encoder.
    pub fn embed_labels(
        encoder: &dyn EncoderPlugin,
        label_texts: &[String],
    ) -> Result<Array2<f64>> {
        let dim = encoder.output_dim();
        let mut z = Array2::zeros((label_texts.len(), dim));
        for (i, text) in label_texts.iter().enumerate() {
            match encoder.encode(EncoderInput::Text(text))? {
                Embedding::Pooled(v) if v.len() == dim => z.row_mut(i).assign(&v),
                _ => {
                    return Err(Error::Encoder {
                        id: encoder.id().to_string(),
                        msg: "label embedding must be pooled with the declared dim".into(),
                    })
                }
            }
        }
        Ok(z)
    }

    pub fn label_embeddings(&self) -> &Array2<f64> {
        &self.label_embeddings
    }

    pub fn scale(&self) -> f64 {
        self.params[0].exp()
    }

    fn adapt(&self, v: &Array1<f64>) -> Array1<f64> {
        if !self.adapter {
            return v.clone();
        }
        let d = self.input_dim;
        let mut out = Array1::zeros(d);
        for r in 0..d {
            let row = &self.params[1 + r * d..1 + (r + 1) * d];
            let mut acc = self.params[1 + d * d + r];
            for (a, x) in row.iter().zip(v.iter()) {
                acc += a * x;
            }
            out[r] = acc;
        }
        out
    }

    fn pooled<'a>(&self, input: &'a Embedding) -> Result<&'a Array1<f64>> {
        match input {
            Embedding::Pooled(v) if v.len() == self.input_dim => Ok(v),
            _ => Err(Error::ShapeMismatch(
                "similarity head expects a pooled embedding of matching dim".into(),
            )),
        }
    }
}

impl ClassifierHead for SimilarityHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Similarity
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn label_count(&self) -> usize {
        self.label_embeddings.nrows()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, input: &Embedding) -> Result<Array1<f64>> {
        let v = self.pooled(input)?;
        let u = self.adapt(v);
        similarity_logits(u.view(), &self.label_embeddings, self.scale())
    }

    fn accumulate_grad(
        &self,
        input: &Embedding,
        grad_logits: ArrayView1<'_, f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        let v = self.pooled(input)?;
        let u = self.adapt(v);
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("zero-norm embedding in similarity head"));
        }
        let u_hat = &u / norm;
        let s = self.scale();

        // logit_i = s * (u . z_i) / |u|, with z_i unit rows.
        let mut d_u = Array1::<f64>::zeros(self.input_dim);
        let mut d_ln_s = 0.0;
        for (i, z) in self.label_embeddings.rows().into_iter().enumerate() {
            let g = grad_logits[i];
            if g == 0.0 {
                continue;
            }
            let cos = u_hat.dot(&z);
            d_ln_s += g * s * cos;
            // d cos / d u = (z - cos * u_hat) / |u|
            d_u.scaled_add(g * s / norm, &(&z - &(&u_hat * cos)));
        }
        grads[0] += d_ln_s;
        if self.adapter {
            let d = self.input_dim;
            for r in 0..d {
                let gr = d_u[r];
                if gr == 0.0 {
                    continue;
                }
                let row = &mut grads[1 + r * d..1 + (r + 1) * d];
                for (a, x) in row.iter_mut().zip(v.iter()) {
                    *a += gr * x;
                }
                grads[1 + d * d + r] += gr;
            }
        }
        Ok(())
    }
}

/// Runs a serialized contextual utterance through a pooled text encoder and
/// the linear head. Encoder failures are propagated with instance context.
pub fn utterance_logits(
    context: &ContextualUtterance,
    encoder: &dyn EncoderPlugin,
    head: &LinearHead,
) -> Result<Array1<f64>> {
    let embedding = encoder
        .encode(EncoderInput::Text(&context.serialized))
        .map_err(|e| Error::Encoder {
            id: encoder.id().to_string(),
            msg: format!("failed on utterance {:?}: {e}", context.serialized),
        })?;
    head.logits(&embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn identical_vectors_have_cosine_one() {
        let z = array![[0.6, 0.8]];
        let logits = similarity_logits(array![0.6, 0.8].view(), &z, 1.0).unwrap();
        assert_relative_eq!(logits[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn orthogonal_vectors_have_cosine_zero() {
        let z = array![[1.0, 0.0]];
        let logits = similarity_logits(array![0.0, 2.0].view(), &z, 1.0).unwrap();
        assert_relative_eq!(logits[0], 0.0);
    }

    #[test]
    fn opposite_vectors_have_cosine_minus_one() {
        let z = array![[1.0, 0.0]];
        let logits = similarity_logits(array![-3.0, 0.0].view(), &z, 1.0).unwrap();
        assert_relative_eq!(logits[0], -1.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_norm_vector_is_rejected() {
        let z = array![[1.0, 0.0]];
        assert!(similarity_logits(array![0.0, 0.0].view(), &z, 1.0).is_err());
        let z0 = array![[0.0, 0.0]];
        assert!(similarity_logits(array![1.0, 0.0].view(), &z0, 1.0).is_err());
    }

    #[test]
    fn cosine_is_invariant_to_positive_rescaling() {
        let z = array![[0.3, -0.7, 0.1], [0.9, 0.2, -0.4]];
        let v = array![1.2, -0.5, 0.8];
        let scaled = &v * 37.5;
        let a = similarity_logits(v.view(), &z, 5.0).unwrap();
        let b = similarity_logits(scaled.view(), &z, 5.0).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn linear_head_zero_weights_returns_bias() {
        let mut head = LinearHead::new(4, 3);
        let l = 3;
        let d = 4;
        head.params_mut()[l * d] = 0.5;
        head.params_mut()[l * d + 1] = -1.0;
        head.params_mut()[l * d + 2] = 2.0;
        let out = head
            .logits(&Embedding::Pooled(array![9.0, -3.0, 0.1, 7.0]))
            .unwrap();
        assert_eq!(out, array![0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_head_shapes_and_token_rejection() {
        let head = LinearHead::new(16, 19);
        let out = head.logits(&Embedding::Pooled(Array1::zeros(16))).unwrap();
        assert_eq!(out.len(), 19);
        assert!(head.logits(&Embedding::Pooled(Array1::zeros(8))).is_err());
        assert!(head
            .logits(&Embedding::Tokens(Array2::zeros((4, 16))))
            .is_err());
    }

    #[test]
    fn linear_head_gradient_matches_finite_differences() {
        let mut head = LinearHead::new(3, 2);
        for (i, p) in head.params_mut().iter_mut().enumerate() {
            *p = (i as f64 * 0.37).sin() * 0.5;
        }
        let x = Embedding::Pooled(array![0.4, -1.1, 2.2]);
        let g = array![0.7, -0.3];
        let mut grads = vec![0.0; head.params().len()];
        head.accumulate_grad(&x, g.view(), &mut grads).unwrap();
        let h = 1e-6;
        for k in 0..head.params().len() {
            let orig = head.params()[k];
            head.params_mut()[k] = orig + h;
            let up = head.logits(&x).unwrap();
            head.params_mut()[k] = orig - h;
            let down = head.logits(&x).unwrap();
            head.params_mut()[k] = orig;
            let fd: f64 = (0..2).map(|j| g[j] * (up[j] - down[j]) / (2.0 * h)).sum();
            assert!(
                (grads[k] - fd).abs() < 1e-6,
                "param {k}: analytic {} vs fd {fd}",
                grads[k]
            );
        }
    }

    #[test]
    fn similarity_head_gradient_matches_finite_differences() {
        let z = array![
            [0.2, -0.6, 0.9, 0.1],
            [-0.5, 0.4, 0.3, -0.8],
            [0.7, 0.7, -0.2, 0.2]
        ];
        let mut head = SimilarityHead::new(z, true).unwrap();
        for (i, p) in head.params_mut().iter_mut().enumerate().skip(1) {
            *p += (i as f64 * 0.17).cos() * 0.05;
        }
        let x = Embedding::Pooled(array![0.9, -0.2, 0.5, 1.4]);
        let g = array![0.3, -0.8, 0.5];
        let mut grads = vec![0.0; head.params().len()];
        head.accumulate_grad(&x, g.view(), &mut grads).unwrap();
        let h = 1e-6;
        for k in 0..head.params().len() {
            let orig = head.params()[k];
            head.params_mut()[k] = orig + h;
            let up = head.logits(&x).unwrap();
            head.params_mut()[k] = orig - h;
            let down = head.logits(&x).unwrap();
            head.params_mut()[k] = orig;
            let fd: f64 = (0..3).map(|j| g[j] * (up[j] - down[j]) / (2.0 * h)).sum();
            assert!(
                (grads[k] - fd).abs() < 1e-5,
                "param {k}: analytic {} vs fd {fd}",
                grads[k]
            );
        }
    }

    #[test]
    fn similarity_head_normalizes_label_embeddings_once() {
        let z = array![[3.0, 4.0], [0.0, 2.0]];
        let head = SimilarityHead::new(z, false).unwrap();
        for row in head.label_embeddings().rows() {
            assert_relative_eq!(row.dot(&row).sqrt(), 1.0, max_relative = 1e-12);
        }
        assert_relative_eq!(head.scale(), 10.0, max_relative = 1e-12);
    }
}
