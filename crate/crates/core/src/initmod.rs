//! Prototype initialization for the inner loop.
//!
//! A temporary query mask is predicted with the support prototypes, pooled
//! into temporary query prototypes, and a shared weight generator (one
//! fully-connected layer plus sigmoid over the concatenated prototype pair)
//! produces per-class, per-channel mixing weights. Initialized query
//! prototypes are the convex combination `omega * P_s + (1 - omega) * P'`,
//! and the inner-loop target mask is the argmax prediction under them.

use crate::error::{Error, Result};
use crate::mask::{LabelMask, SoftMask};
use crate::proto::{hard_mask, masked_average_pool, soft_predict, PrototypeSet};
use crate::tensor::Tensor;

/// Shared fully-connected generator: W is (2C)xC applied to the
/// concatenation (support row, temporary row), b is a C vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGenerator {
    w: Tensor,
    b: Tensor,
}

impl WeightGenerator {
    /// Zero initialization: every mixing weight starts at 0.5.
    pub fn zeros(channels: usize) -> Self {
        WeightGenerator {
            w: Tensor::zeros(vec![2 * channels, channels]),
            b: Tensor::zeros(vec![channels]),
        }
    }

    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.shape().len() != 2 || b.shape().len() != 1 {
            return Err(Error::invalid("WeightGenerator: W must be 2CxC, b must be C".to_string()));
        }
        let c = b.shape()[0];
        if w.shape() != [2 * c, c] {
            return Err(Error::ShapeMismatch {
                context: "WeightGenerator W",
                expected: vec![2 * c, c],
                got: w.shape().to_vec(),
            });
        }
        w.assert_finite("WeightGenerator W")?;
        b.assert_finite("WeightGenerator b")?;
        Ok(WeightGenerator { w, b })
    }

    pub fn channels(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn w_mut(&mut self) -> &mut Tensor {
        &mut self.w
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }
}

/// (N+1)xC mixing weights, each strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct WeightTensor {
    omega: Tensor,
}

impl WeightTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.omega
    }

    pub fn from_tensor(omega: Tensor) -> Result<Self> {
        if omega.shape().len() != 2 {
            return Err(Error::invalid("WeightTensor: expected (N+1)xC".to_string()));
        }
        if omega.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::invalid(
                "WeightTensor: entries must lie strictly inside (0,1)".to_string(),
            ));
        }
        Ok(WeightTensor { omega })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Temporary query mask: prediction of the query features against the
/// support prototypes, both soft and argmax forms.
pub fn temp_query_mask(
    q: &Tensor,
    p_s: &PrototypeSet,
    alpha: f64,
) -> Result<(SoftMask, LabelMask)> {
    let soft = soft_predict(q, p_s, alpha)?;
    let hard = hard_mask(&soft);
    Ok((soft, hard))
}

/// Temporary query prototypes: masked average pooling of the query features
/// under the temporary mask; classes absent from the mask fall back to the
/// corresponding support prototype row.
pub fn temp_query_protos(
    q: &Tensor,
    mprime: &LabelMask,
    fallback: &PrototypeSet,
) -> Result<PrototypeSet> {
    let pooled = masked_average_pool(&[q], &[mprime], fallback.n_classes())?;
    pooled.into_prototypes_or(fallback)
}

/// omega[c] = sigmoid(concat(P_s[c], P'[c]) . W + b), one row per class.
pub fn generate_weights(
    p_s: &PrototypeSet,
    p_prime: &PrototypeSet,
    gen: &WeightGenerator,
) -> Result<WeightTensor> {
    let c = gen.channels();
    if p_s.channels() != c || p_prime.channels() != c || p_s.n_classes() != p_prime.n_classes() {
        return Err(Error::ShapeMismatch {
            context: "generate_weights",
            expected: vec![p_s.n_classes(), c],
            got: vec![p_prime.n_classes(), p_prime.channels()],
        });
    }
    let k = p_s.n_classes();
    let mut omega = Tensor::zeros(vec![k, c]);
    for cls in 0..k {
        let rs = p_s.row(cls);
        let rp = p_prime.row(cls);
        for j in 0..c {
            let mut z = gen.b.data()[j];
            for i in 0..c {
                z += rs[i] * gen.w.data()[i * c + j];
            }
            for i in 0..c {
                z += rp[i] * gen.w.data()[(c + i) * c + j];
            }
            omega.data_mut()[cls * c + j] = sigmoid(z);
        }
    }
    Ok(WeightTensor { omega })
}

/// P0_q = omega * P_s + (1 - omega) * P', elementwise per class and channel.
pub fn init_query_protos(
    p_s: &PrototypeSet,
    p_prime: &PrototypeSet,
    omega: &WeightTensor,
) -> Result<PrototypeSet> {
    let (k, c) = (p_s.n_classes(), p_s.channels());
    if p_prime.n_classes() != k || p_prime.channels() != c || omega.omega.shape() != [k, c] {
        return Err(Error::ShapeMismatch {
            context: "init_query_protos",
            expected: vec![k, c],
            got: omega.omega.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![k, c]);
    for i in 0..k * c {
        let w = omega.omega.data()[i];
        out.data_mut()[i] = w * p_s.tensor().data()[i] + (1.0 - w) * p_prime.tensor().data()[i];
    }
    PrototypeSet::new(out)
}

/// Target mask for inner optimization: soft and argmax prediction of the
/// query features under the initialized prototypes. The soft map is kept
/// because the combined segmentation loss trains on it.
pub fn build_target_mask(
    q: &Tensor,
    p0: &PrototypeSet,
    alpha: f64,
) -> Result<(SoftMask, LabelMask)> {
    let soft = soft_predict(q, p0, alpha)?;
    let hard = hard_mask(&soft);
    Ok((soft, hard))
}

/// Gradients flowing back through [`generate_weights`].
#[derive(Debug, Clone)]
pub struct GeneratorGrads {
    pub d_w: Tensor,
    pub d_b: Tensor,
    pub d_ps: Tensor,
    pub d_pprime: Tensor,
}

/// Exact gradients of the sigmoid-linear generator given dL/d omega.
pub fn weight_generator_backward(
    p_s: &PrototypeSet,
    p_prime: &PrototypeSet,
    gen: &WeightGenerator,
    grad_omega: &Tensor,
) -> Result<GeneratorGrads> {
    let c = gen.channels();
    let k = p_s.n_classes();
    if grad_omega.shape() != [k, c] {
        return Err(Error::ShapeMismatch {
            context: "weight_generator_backward grad_omega",
            expected: vec![k, c],
            got: grad_omega.shape().to_vec(),
        });
    }
    let omega = generate_weights(p_s, p_prime, gen)?;
    let mut d_w = Tensor::zeros(vec![2 * c, c]);
    let mut d_b = Tensor::zeros(vec![c]);
    let mut d_ps = Tensor::zeros(vec![k, c]);
    let mut d_pprime = Tensor::zeros(vec![k, c]);
    for cls in 0..k {
        let rs = p_s.row(cls);
        let rp = p_prime.row(cls);
        for j in 0..c {
            let o = omega.omega.data()[cls * c + j];
            let dz = grad_omega.data()[cls * c + j] * o * (1.0 - o);
            if dz == 0.0 {
                continue;
            }
            d_b.data_mut()[j] += dz;
            for i in 0..c {
                d_w.data_mut()[i * c + j] += dz * rs[i];
                d_w.data_mut()[(c + i) * c + j] += dz * rp[i];
                d_ps.data_mut()[cls * c + i] += dz * gen.w.data()[i * c + j];
                d_pprime.data_mut()[cls * c + i] += dz * gen.w.data()[(c + i) * c + j];
            }
        }
    }
    Ok(GeneratorGrads {
        d_w,
        d_b,
        d_ps,
        d_pprime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::cosine_score_map;
    use crate::rng::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn rand_protos(k: usize, c: usize, rng: &mut Rng) -> PrototypeSet {
        loop {
            let t = rand_tensor(vec![k, c], rng);
            if let Ok(p) = PrototypeSet::new(t) {
                return p;
            }
        }
    }

    #[test]
    fn temp_mask_nearest_prototype() {
        let p = PrototypeSet::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let q = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        let (_, m) = temp_query_mask(&q, &p, 20.0).unwrap();
        assert_eq!(m.labels(), &[1]);
    }

    #[test]
    fn temp_mask_tie_goes_to_background() {
        let p = PrototypeSet::new(
            Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let mut rng = Rng::new(1);
        let q = rand_tensor(vec![2, 3, 2], &mut rng);
        let (soft, m) = temp_query_mask(&q, &p, 20.0).unwrap();
        assert!(soft.probs().data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn temp_mask_matches_per_pixel_cosine_oracle() {
        let mut rng = Rng::new(2);
        let q = rand_tensor(vec![4, 5, 3], &mut rng);
        let p = rand_protos(3, 3, &mut rng);
        let (_, m) = temp_query_mask(&q, &p, 20.0).unwrap();
        let scores = cosine_score_map(&q, &p, 20.0).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let mut best = 0;
                for c in 1..3 {
                    if scores.data()[scores.idx3(y, x, c)] > scores.data()[scores.idx3(y, x, best)] {
                        best = c;
                    }
                }
                assert_eq!(m.get(y, x) as usize, best);
            }
        }
    }

    #[test]
    fn temp_protos_all_one_class_uses_fallback() {
        let mut rng = Rng::new(3);
        let q = rand_tensor(vec![2, 2, 2], &mut rng);
        let fallback = rand_protos(2, 2, &mut rng);
        let m = LabelMask::new(2, 2, vec![1; 4]).unwrap();
        let p = temp_query_protos(&q, &m, &fallback).unwrap();
        // class 1 is the mean of all query pixels
        for ch in 0..2 {
            let mean: f64 = (0..4).map(|i| q.data()[i * 2 + ch]).sum::<f64>() / 4.0;
            assert!((p.row(1)[ch] - mean).abs() < 1e-12);
        }
        // background falls back to the support row
        assert_eq!(p.row(0), fallback.row(0));
    }

    #[test]
    fn temp_protos_constant_map() {
        let q = Tensor::full(vec![3, 3, 2], 0.4);
        let mut rng = Rng::new(4);
        let fallback = rand_protos(2, 2, &mut rng);
        let labels: Vec<u8> = (0..9).map(|i| (i % 2) as u8).collect();
        let m = LabelMask::new(3, 3, labels).unwrap();
        let p = temp_query_protos(&q, &m, &fallback).unwrap();
        for cls in 0..2 {
            assert!(p.row(cls).iter().all(|&v| (v - 0.4).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_generator_gives_half_weights() {
        let mut rng = Rng::new(5);
        let ps = rand_protos(3, 4, &mut rng);
        let pp = rand_protos(3, 4, &mut rng);
        let gen = WeightGenerator::zeros(4);
        let omega = generate_weights(&ps, &pp, &gen).unwrap();
        assert!(omega.tensor().data().iter().all(|&v| v == 0.5));

        // and then the init path is exactly the midpoint
        let p0 = init_query_protos(&ps, &pp, &omega).unwrap();
        for i in 0..12 {
            let mid = (ps.tensor().data()[i] + pp.tensor().data()[i]) / 2.0;
            assert_eq!(p0.tensor().data()[i], mid);
        }
    }

    #[test]
    fn bias_ten_saturates_weights() {
        let mut rng = Rng::new(6);
        let ps = rand_protos(2, 3, &mut rng);
        let pp = rand_protos(2, 3, &mut rng);
        let gen = WeightGenerator::new(
            Tensor::zeros(vec![6, 3]),
            Tensor::full(vec![3], 10.0),
        )
        .unwrap();
        let omega = generate_weights(&ps, &pp, &gen).unwrap();
        let want = 1.0 / (1.0 + (-10.0f64).exp());
        assert!(omega
            .tensor()
            .data()
            .iter()
            .all(|&v| (v - want).abs() < 1e-15 && v > 0.9999));
    }

    #[test]
    fn identical_rows_get_identical_weights() {
        let mut rng = Rng::new(7);
        let row: Vec<f64> = (0..3).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let mut data = row.clone();
        data.extend(&row);
        let ps = PrototypeSet::new(Tensor::new(vec![2, 3], data).unwrap()).unwrap();
        let pp0 = rand_protos(2, 3, &mut rng);
        let mut pdata = pp0.row(0).to_vec();
        pdata.extend(pp0.row(0));
        let pp = PrototypeSet::new(Tensor::new(vec![2, 3], pdata).unwrap()).unwrap();
        let gen = WeightGenerator::new(
            rand_tensor(vec![6, 3], &mut rng),
            rand_tensor(vec![3], &mut rng),
        )
        .unwrap();
        let omega = generate_weights(&ps, &pp, &gen).unwrap();
        assert_eq!(&omega.tensor().data()[..3], &omega.tensor().data()[3..]);
    }

    #[test]
    fn init_protos_endpoints_and_midpoint() {
        let ps = PrototypeSet::new(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let pp = PrototypeSet::new(Tensor::new(vec![2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap()).unwrap();

        let nearly_one = WeightTensor::from_tensor(Tensor::full(vec![2, 2], 1.0 - 1e-15)).unwrap();
        let p0 = init_query_protos(&ps, &pp, &nearly_one).unwrap();
        for (a, b) in p0.tensor().data().iter().zip(ps.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let nearly_zero = WeightTensor::from_tensor(Tensor::full(vec![2, 2], 1e-15)).unwrap();
        let p0 = init_query_protos(&ps, &pp, &nearly_zero).unwrap();
        for (a, b) in p0.tensor().data().iter().zip(pp.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let half = WeightTensor::from_tensor(Tensor::full(vec![2, 2], 0.5)).unwrap();
        let p0 = init_query_protos(&ps, &pp, &half).unwrap();
        assert_eq!(p0.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn init_protos_stay_between_endpoints() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let ps = rand_protos(3, 4, &mut rng);
            let pp = rand_protos(3, 4, &mut rng);
            let gen = WeightGenerator::new(
                rand_tensor(vec![8, 4], &mut rng),
                rand_tensor(vec![4], &mut rng),
            )
            .unwrap();
            let omega = generate_weights(&ps, &pp, &gen).unwrap();
            assert!(omega.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
            if let Ok(p0) = init_query_protos(&ps, &pp, &omega) {
                for i in 0..12 {
                    let (a, b) = (ps.tensor().data()[i], pp.tensor().data()[i]);
                    let v = p0.tensor().data()[i];
                    assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn init_protos_rejects_degenerate_result() {
        let ps = PrototypeSet::new(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let pp = PrototypeSet::new(Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap()).unwrap();
        let half = WeightTensor::from_tensor(Tensor::full(vec![2, 1], 0.5)).unwrap();
        let err = init_query_protos(&ps, &pp, &half);
        assert!(matches!(err, Err(Error::DegeneratePrototype { class: 0 })));
    }

    #[test]
    fn target_mask_with_saturated_omega_reproduces_temp_mask() {
        let mut rng = Rng::new(9);
        let q = rand_tensor(vec![4, 4, 3], &mut rng);
        let ps = rand_protos(3, 3, &mut rng);
        let pp = rand_protos(3, 3, &mut rng);
        let omega = WeightTensor::from_tensor(Tensor::full(vec![3, 3], 1.0 - 1e-16)).unwrap();
        let p0 = init_query_protos(&ps, &pp, &omega).unwrap();
        let (_, target) = build_target_mask(&q, &p0, 20.0).unwrap();
        let (_, mprime) = temp_query_mask(&q, &ps, 20.0).unwrap();
        assert_eq!(target.labels(), mprime.labels());
    }

    #[test]
    fn target_mask_matches_argmax_oracle() {
        let mut rng = Rng::new(10);
        let q = rand_tensor(vec![3, 4, 3], &mut rng);
        let p0 = rand_protos(3, 3, &mut rng);
        let (soft, target) = build_target_mask(&q, &p0, 20.0).unwrap();
        let scores = cosine_score_map(&q, &p0, 20.0).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let mut best = 0;
                for c in 1..3 {
                    if scores.data()[scores.idx3(y, x, c)] > scores.data()[scores.idx3(y, x, best)] {
                        best = c;
                    }
                }
                assert_eq!(target.get(y, x) as usize, best);
                let sum: f64 = (0..3).map(|c| soft.prob(y, x, c)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_backward_zero_grad() {
        let mut rng = Rng::new(11);
        let ps = rand_protos(2, 3, &mut rng);
        let pp = rand_protos(2, 3, &mut rng);
        let gen = WeightGenerator::new(
            rand_tensor(vec![6, 3], &mut rng),
            rand_tensor(vec![3], &mut rng),
        )
        .unwrap();
        let g = weight_generator_backward(&ps, &pp, &gen, &Tensor::zeros(vec![2, 3])).unwrap();
        assert!(g.d_w.data().iter().all(|&v| v == 0.0));
        assert!(g.d_b.data().iter().all(|&v| v == 0.0));
        assert!(g.d_ps.data().iter().all(|&v| v == 0.0));
        assert!(g.d_pprime.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_backward_zero_init_bias_rule() {
        // sigmoid'(0) = 0.25, so with W = 0, b = 0 the bias gradient is
        // 0.25 * sum over classes of grad_omega.
        let mut rng = Rng::new(12);
        let ps = rand_protos(3, 2, &mut rng);
        let pp = rand_protos(3, 2, &mut rng);
        let gen = WeightGenerator::zeros(2);
        let go = rand_tensor(vec![3, 2], &mut rng);
        let g = weight_generator_backward(&ps, &pp, &gen, &go).unwrap();
        for j in 0..2 {
            let want = 0.25 * (0..3).map(|cls| go.data()[cls * 2 + j]).sum::<f64>();
            assert!((g.d_b.data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn generator_backward_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let ps = rand_protos(3, 3, &mut rng);
        let pp = rand_protos(3, 3, &mut rng);
        let gen = WeightGenerator::new(
            rand_tensor(vec![6, 3], &mut rng),
            rand_tensor(vec![3], &mut rng),
        )
        .unwrap();
        let go = rand_tensor(vec![3, 3], &mut rng);
        let loss = |ps: &PrototypeSet, pp: &PrototypeSet, gen: &WeightGenerator| -> f64 {
            let omega = generate_weights(ps, pp, gen).unwrap();
            omega
                .tensor()
                .data()
                .iter()
                .zip(go.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = weight_generator_backward(&ps, &pp, &gen, &go).unwrap();
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..gen.w().len() {
            let mut gp = gen.clone();
            gp.w_mut().data_mut()[i] += eps;
            let mut gm = gen.clone();
            gm.w_mut().data_mut()[i] -= eps;
            let fd = (loss(&ps, &pp, &gp) - loss(&ps, &pp, &gm)) / (2.0 * eps);
            let a = g.d_w.data()[i];
            max_rel = max_rel.max((a - fd).abs() / fd.abs().max(a.abs()).max(1.0));
        }
        for i in 0..gen.b().len() {
            let mut gp = gen.clone();
            gp.b_mut().data_mut()[i] += eps;
            let mut gm = gen.clone();
            gm.b_mut().data_mut()[i] -= eps;
            let fd = (loss(&ps, &pp, &gp) - loss(&ps, &pp, &gm)) / (2.0 * eps);
            let a = g.d_b.data()[i];
            max_rel = max_rel.max((a - fd).abs() / fd.abs().max(a.abs()).max(1.0));
        }
        for i in 0..ps.tensor().len() {
            let mut tp = ps.tensor().clone();
            tp.data_mut()[i] += eps;
            let mut tm = ps.tensor().clone();
            tm.data_mut()[i] -= eps;
            let fd = (loss(&PrototypeSet::new(tp).unwrap(), &pp, &gen)
                - loss(&PrototypeSet::new(tm).unwrap(), &pp, &gen))
                / (2.0 * eps);
            let a = g.d_ps.data()[i];
            max_rel = max_rel.max((a - fd).abs() / fd.abs().max(a.abs()).max(1.0));
        }
        for i in 0..pp.tensor().len() {
            let mut tp = pp.tensor().clone();
            tp.data_mut()[i] += eps;
            let mut tm = pp.tensor().clone();
            tm.data_mut()[i] -= eps;
            let fd = (loss(&ps, &PrototypeSet::new(tp).unwrap(), &gen)
                - loss(&ps, &PrototypeSet::new(tm).unwrap(), &gen))
                / (2.0 * eps);
            let a = g.d_pprime.data()[i];
            max_rel = max_rel.max((a - fd).abs() / fd.abs().max(a.abs()).max(1.0));
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }
}
