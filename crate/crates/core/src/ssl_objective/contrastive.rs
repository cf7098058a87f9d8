use crate::autodiff::{log_softmax, matmul, matmul_t, Tensor};
use crate::error::{ensure, Error, Result};

/// Value of the symmetric NCE loss and its gradients.
#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub value: f64,
    pub grad_vid: Tensor,
    pub grad_aud: Tensor,
}

fn normalize(z: &Tensor, matrix: &'static str) -> Result<(Tensor, Vec<f64>)> {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::ZeroNorm { matrix, row: r });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

fn unnormalize_grad(unit: &Tensor, norms: &[f64], g_unit: &Tensor) -> Tensor {
    let mut g = g_unit.clone();
    for (r, &n) in norms.iter().enumerate() {
        let u = unit.row(r);
        let dot: f64 = u.iter().zip(g_unit.row(r)).map(|(a, b)| a * b).sum();
        for (gv, uv) in g.row_mut(r).iter_mut().zip(u) {
            *gv = (*gv - uv * dot) / n;
        }
    }
    g
}

/// Symmetric NCE over `S = Z′_aud · Z′_vidᵀ / temperature` with row-L2
/// normalized embeddings; matching rows are the positives.
pub fn contrastive_loss(z_vid: &Tensor, z_aud: &Tensor, temperature: f64) -> Result<ContrastiveOutput> {
    ensure!(
        z_vid.shape() == z_aud.shape() && z_vid.shape().len() == 2,
        Shape,
        "embedding banks differ: {:?} vs {:?}",
        z_vid.shape(),
        z_aud.shape()
    );
    let k = z_vid.rows();
    ensure!(k >= 1, InvalidArgument, "empty embedding bank");
    ensure!(temperature > 0.0, InvalidArgument, "temperature must be positive");
    let (v, v_norm) = normalize(z_vid, "video")?;
    let (a, a_norm) = normalize(z_aud, "audio")?;
    let s = matmul_t(&a, &v)?.map(|x| x / temperature);
    let st = s.transpose2();
    let mut value = 0.0;
    let mut ds = Tensor::zeros(&[k, k]);
    let scale = 0.5 / k as f64;
    for i in 0..k {
        let row = log_softmax(s.row(i));
        let col = log_softmax(st.row(i));
        value -= row[i] + col[i];
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            ds.data_mut()[i * k + j] += scale * (row[j].exp() - target);
            ds.data_mut()[j * k + i] += scale * (col[j].exp() - target);
        }
    }
    value *= scale;
    let g_a = matmul(&ds, &v)?.map(|x| x / temperature);
    let g_v = matmul(&ds.transpose2(), &a)?.map(|x| x / temperature);
    Ok(ContrastiveOutput {
        value,
        grad_vid: unnormalize_grad(&v, &v_norm, &g_v),
        grad_aud: unnormalize_grad(&a, &a_norm, &g_a),
    })
}
