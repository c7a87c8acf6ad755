//! Probabilistic binary weight masks.
//!
//! Each maskable parameter gets a logit tensor `l` aligned with it. A soft
//! sample is `s = sigmoid((l - noise) / tau)` where the noise is
//! `ln(ln U1 / ln U2)` from two independent uniforms per element; hard
//! samples come from straight-through binarization of `s`. The binarized
//! samples are Bernoulli(sigmoid(l)) regardless of temperature, so
//! deterministic masks are obtained by thresholding `l > 0`.

use std::collections::{HashMap, HashSet};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// log(p / (1-p)).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Noise term of one soft sample, from two uniforms in (0, 1).
pub fn gumbel_noise_from(u1: f64, u2: f64) -> f64 {
    (u1.ln() / u2.ln()).ln()
}

/// Draws the (U1, U2) pair for one element and returns the noise term.
pub fn gumbel_noise(rng: &mut Stream) -> f64 {
    let u1 = rng.uniform_open();
    let u2 = rng.uniform_open();
    gumbel_noise_from(u1, u2)
}

/// Logit tensors aligned 1:1 with the non-excluded parameters of a store.
#[derive(Debug, Clone)]
pub struct MaskSet<E> {
    /// (name, layer, logits) in parameter-store order.
    entries: Vec<(String, usize, Tensor<E>)>,
    index: HashMap<String, usize>,
    excluded: HashSet<String>,
    /// Parameters whose bits are pinned to a constant pattern; their logits
    /// are neither sampled, regularized nor trained.
    fixed: HashMap<String, Vec<bool>>,
    pub temperature: f64,
    pub stage: String,
}

impl<E: Element> MaskSet<E> {
    /// All logits set to `logit(keep_prob)`; `keep_prob` must lie strictly
    /// inside (0, 1).
    pub fn init(
        params: &ParamStore<E>,
        keep_prob: f64,
        excluded: &[String],
        stage: impl Into<String>,
    ) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob < 1.0) {
            return Err(Error::Mask(format!(
                "keep_prob must be in (0,1), got {keep_prob}"
            )));
        }
        let excluded: HashSet<String> = excluded.iter().cloned().collect();
        let init = E::from_f64(logit(keep_prob));
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for p in params.iter() {
            if excluded.contains(&p.name) {
                continue;
            }
            index.insert(p.name.clone(), entries.len());
            entries.push((p.name.clone(), p.layer, Tensor::filled(p.tensor.shape(), init)));
        }
        if entries.is_empty() {
            return Err(Error::Mask("every parameter is excluded from masking".into()));
        }
        Ok(MaskSet {
            entries,
            index,
            excluded,
            fixed: HashMap::new(),
            temperature: 1.0,
            stage: stage.into(),
        })
    }

    pub fn from_entries(
        entries: Vec<(String, usize, Tensor<E>)>,
        excluded: HashSet<String>,
        fixed: HashMap<String, Vec<bool>>,
        temperature: f64,
        stage: String,
    ) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::Mask(format!("temperature must be positive, got {temperature}")));
        }
        let mut index = HashMap::new();
        for (i, (name, _, _)) in entries.iter().enumerate() {
            index.insert(name.clone(), i);
        }
        Ok(MaskSet {
            entries,
            index,
            excluded,
            fixed,
            temperature,
            stage,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, &Tensor<E>)> {
        self.entries.iter().map(|(n, l, t)| (n.as_str(), *l, t))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(n, _, t)| (n.as_str(), t))
    }

    pub fn logits(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].2)
    }

    /// Position of a parameter in entry order (aligns external per-entry
    /// buffers like noise draws).
    pub fn entry_position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn logits_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].2)
    }

    pub fn excluded(&self) -> &HashSet<String> {
        &self.excluded
    }

    pub fn fixed_bits(&self, name: &str) -> Option<&[bool]> {
        self.fixed.get(name).map(|b| b.as_slice())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index.contains_key(name) && !self.fixed.contains_key(name)
    }

    /// Pin a parameter's bits to a fixed pattern (e.g. reuse the output
    /// layer of a mask trained on the full dataset).
    pub fn fix_bits(&mut self, name: &str, bits: Vec<bool>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Mask(format!("no logits for parameter {name:?}")))?;
        if bits.len() != self.entries[i].2.numel() {
            return Err(Error::Mask(format!(
                "fixed bits length {} does not match parameter {name:?} ({})",
                bits.len(),
                self.entries[i].2.numel()
            )));
        }
        self.fixed.insert(name.to_string(), bits);
        Ok(())
    }

    /// Check 1:1 alignment with a parameter store.
    pub fn validate_against(&self, params: &ParamStore<E>) -> Result<()> {
        for p in params.iter() {
            if self.excluded.contains(&p.name) {
                if self.index.contains_key(&p.name) {
                    return Err(Error::Mask(format!("{:?} is both excluded and masked", p.name)));
                }
                continue;
            }
            match self.logits(&p.name) {
                None => return Err(Error::Mask(format!("no logits for parameter {:?}", p.name))),
                Some(l) if l.shape() != p.tensor.shape() => {
                    return Err(Error::Mask(format!(
                        "logit shape {:?} does not match parameter {:?} {:?}",
                        l.shape(),
                        p.name,
                        p.tensor.shape()
                    )))
                }
                _ => {}
            }
        }
        for (name, _, _) in &self.entries {
            if params.get(name).is_none() {
                return Err(Error::Mask(format!("logits for unknown parameter {name:?}")));
            }
        }
        Ok(())
    }

    /// Fresh per-element noise for one mask sample, in entry order. The
    /// uniforms come from the stream at full width; the logs run at element
    /// precision (the training path's working precision).
    pub fn sample_noise(&self, rng: &mut Stream) -> Vec<Tensor<E>> {
        self.entries
            .iter()
            .map(|(_, _, l)| {
                let data: Vec<E> = (0..l.numel())
                    .map(|_| {
                        let u1 = E::from_f64(rng.uniform_open());
                        let u2 = E::from_f64(rng.uniform_open());
                        (u1.ln() / u2.ln()).ln()
                    })
                    .collect();
                Tensor::new(l.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    }

    /// Soft samples as plain tensors (no graph), for statistical checks.
    pub fn sample_soft_values(&self, rng: &mut Stream) -> Vec<(String, Tensor<E>)> {
        let inv_tau = E::from_f64(1.0 / self.temperature);
        self.entries
            .iter()
            .map(|(name, _, l)| {
                let data: Vec<E> = l
                    .data()
                    .iter()
                    .map(|&li| ((li - E::from_f64(gumbel_noise(rng))) * inv_tau).sigmoid())
                    .collect();
                (
                    name.clone(),
                    Tensor::new(l.shape().to_vec(), data).expect("same shape"),
                )
            })
            .collect()
    }

    /// Deterministic mask: bit set iff `sigmoid(l) > 0.5`, i.e. iff `l > 0`
    /// (strictly — a logit of exactly zero drops the weight). Fixed
    /// parameters contribute their pinned bits.
    pub fn threshold(&self) -> BinaryMask {
        let bits = self
            .entries
            .iter()
            .map(|(name, layer, l)| {
                let b = match self.fixed.get(name) {
                    Some(fixed) => fixed.clone(),
                    None => l.data().iter().map(|&x| x > E::zero()).collect(),
                };
                (name.clone(), *layer, b)
            })
            .collect();
        BinaryMask {
            entries: bits,
            stage: self.stage.clone(),
        }
    }

    /// Signed sum of trainable logits times alpha.
    pub fn regularizer(&self, alpha: f64) -> f64 {
        let mut sum = 0.0;
        for (name, _, l) in &self.entries {
            if self.fixed.contains_key(name) {
                continue;
            }
            for &x in l.data() {
                sum += x.to_f64();
            }
        }
        alpha * sum
    }

    /// Adds the regularizer gradient — exactly `alpha` per trainable logit —
    /// into `grads` (keyed by parameter name).
    pub fn add_regularizer_grads(&self, grads: &mut HashMap<String, Tensor<E>>, alpha: f64) {
        let a = E::from_f64(alpha);
        for (name, _, l) in &self.entries {
            if self.fixed.contains_key(name) {
                continue;
            }
            let g = grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(l.shape()));
            for x in g.data_mut() {
                *x += a;
            }
        }
    }

    /// Expected keep probability per entry (sigmoid of logits), used by
    /// census reports.
    pub fn keep_probabilities(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|(name, _, l)| {
                let mean = l
                    .data()
                    .iter()
                    .map(|&x| x.sigmoid().to_f64())
                    .sum::<f64>()
                    / l.numel() as f64;
                (name.clone(), mean)
            })
            .collect()
    }

    /// Re-initialize from a previous task's bits: kept positions get
    /// `logit(p_old)`, the rest `logit(p_new)`.
    pub fn biased_reinit(&mut self, prev: &BinaryMask, p_old: f64, p_new: f64) -> Result<()> {
        if !(p_new > 0.0 && p_new <= p_old && p_old < 1.0) {
            return Err(Error::Mask(format!(
                "need 0 < p_new <= p_old < 1, got p_old={p_old} p_new={p_new}"
            )));
        }
        let old = E::from_f64(logit(p_old));
        let new = E::from_f64(logit(p_new));
        for (name, _, l) in &mut self.entries {
            let Some(bits) = prev.bits(name) else {
                for x in l.data_mut() {
                    *x = new;
                }
                continue;
            };
            if bits.len() != l.numel() {
                return Err(Error::Mask(format!("bit length mismatch for {name:?}")));
            }
            for (x, &kept) in l.data_mut().iter_mut().zip(bits) {
                *x = if kept { old } else { new };
            }
        }
        Ok(())
    }
}

/// Thresholded (or sampled) hard mask: one bit per maskable weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    /// (name, layer, bits) in parameter-store order.
    entries: Vec<(String, usize, Vec<bool>)>,
    pub stage: String,
}

impl BinaryMask {
    pub fn new(entries: Vec<(String, usize, Vec<bool>)>, stage: impl Into<String>) -> Self {
        BinaryMask {
            entries,
            stage: stage.into(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, &[bool])> {
        self.entries.iter().map(|(n, l, b)| (n.as_str(), *l, b.as_slice()))
    }

    pub fn bits(&self, name: &str) -> Option<&[bool]> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, b)| b.as_slice())
    }

    pub fn layer_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, l, _)| *l)
    }

    /// Bitwise complement over all maskable positions.
    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            entries: self
                .entries
                .iter()
                .map(|(n, l, b)| (n.clone(), *l, b.iter().map(|&x| !x).collect()))
                .collect(),
            stage: format!("not-{}", self.stage),
        }
    }

    pub fn kept(&self) -> usize {
        self.entries.iter().map(|(_, _, b)| b.iter().filter(|&&x| x).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, _, b)| b.len()).sum()
    }

    pub fn kept_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.kept() as f64 / total as f64
        }
    }

    /// (kept, total) per layer index.
    pub fn layer_census(&self) -> HashMap<usize, (usize, usize)> {
        let mut census: HashMap<usize, (usize, usize)> = HashMap::new();
        for (_, layer, bits) in &self.entries {
            let entry = census.entry(*layer).or_insert((0, 0));
            entry.0 += bits.iter().filter(|&&x| x).count();
            entry.1 += bits.len();
        }
        census
    }

    /// Elementwise product with the parameters: `w' = w * b`. Excluded
    /// parameters (absent from the mask) pass through unchanged. The input
    /// store is untouched.
    pub fn apply<E: Element>(&self, params: &ParamStore<E>) -> Result<ParamStore<E>> {
        let mut out = params.clone();
        for (name, _, bits) in &self.entries {
            let p = out
                .get_mut(name)
                .ok_or_else(|| Error::Mask(format!("mask names unknown parameter {name:?}")))?;
            if bits.len() != p.tensor.numel() {
                return Err(Error::Mask(format!(
                    "mask for {name:?} has {} bits, parameter has {} elements",
                    bits.len(),
                    p.tensor.numel()
                )));
            }
            for (x, &keep) in p.tensor.data_mut().iter_mut().zip(bits) {
                if !keep {
                    *x = E::zero();
                }
            }
        }
        Ok(out)
    }
}

/// Graph fragment of one masked parameter: `w * b` with
/// `b = ste(sigmoid((l - noise) / tau))`. Returns (masked weight node,
/// soft sample node).
pub fn masked_weight_node<E: Element>(
    g: &mut Graph<E>,
    weight: Value,
    logit_leaf: Value,
    noise: Tensor<E>,
    temperature: f64,
) -> Result<(Value, Value)> {
    let noise = g.constant(noise);
    let centered = g.sub(logit_leaf, noise)?;
    let scaled = g.scale(centered, E::from_f64(1.0 / temperature))?;
    let soft = g.sigmoid(scaled)?;
    let hard = g.ste_binarize(soft)?;
    let masked = g.mul(weight, hard)?;
    Ok((masked, soft))
}

/// Near-equal contiguous split of `n` items into `k` parts; the remainder
/// goes to the first parts.
pub fn split_batch_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Mask(format!(
            "cannot split a batch of {n} into {k} mask samples"
        )));
    }
    let base = n / k;
    let rem = n % k;
    Ok((0..k).map(|i| base + usize::from(i < rem)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedPool, StreamKind};

    fn toy_params() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("layer0.weight", 0, Tensor::ones(&[2, 3])).unwrap();
        s.insert("layer0.bias", 0, Tensor::zeros(&[3])).unwrap();
        s.insert("layer1.weight", 1, Tensor::ones(&[3, 2])).unwrap();
        s
    }

    #[test]
    fn init_sets_expected_logits() {
        let params = toy_params();
        let m = MaskSet::init(&params, 0.9, &[], "full").unwrap();
        let l = m.logits("layer0.weight").unwrap().data()[0];
        assert!((l - 2.19722).abs() < 1e-4, "logit(0.9) = {l}");

        let m = MaskSet::init(&params, 0.5, &[], "full").unwrap();
        assert_eq!(m.logits("layer0.weight").unwrap().data()[0], 0.0);

        let m = MaskSet::init(&params, 0.27, &[], "full").unwrap();
        let l = m.logits("layer0.weight").unwrap().data()[0];
        assert!((l - (-0.9946)).abs() < 1e-3, "logit(0.27) = {l}");
    }

    #[test]
    fn init_rejects_degenerate_keep_prob() {
        let params = toy_params();
        for bad in [0.0, 1.0, -0.1, 1.5] {
            assert!(MaskSet::init(&params, bad, &[], "x").is_err());
        }
    }

    #[test]
    fn excluded_params_have_no_logits() {
        let params = toy_params();
        let m = MaskSet::init(&params, 0.9, &["layer0.bias".to_string()], "s").unwrap();
        assert!(m.logits("layer0.bias").is_none());
        m.validate_against(&params).unwrap();
    }

    #[test]
    fn symmetric_uniforms_give_half_sample() {
        // u1 == u2 makes the noise exactly zero, so s = sigmoid(l / tau).
        assert_eq!(gumbel_noise_from(0.5, 0.5), 0.0);
        let s = (0.0f64 - gumbel_noise_from(0.5, 0.5)).sigmoid();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn soft_samples_stay_in_open_interval() {
        let params = toy_params();
        let m = MaskSet::init(&params, 0.9, &[], "s").unwrap();
        let pool = SeedPool::new(5);
        let mut rng = pool.stream(StreamKind::MaskSample, 0);
        for _ in 0..100 {
            for (_, t) in m.sample_soft_values(&mut rng) {
                for &x in t.data() {
                    assert!(x > 0.0 && x < 1.0);
                }
            }
        }
    }

    #[test]
    fn binarized_law_matches_sigmoid_of_logit() {
        // P(s > 0.5) = sigmoid(l); check l = 1 by Monte Carlo.
        let pool = SeedPool::new(9);
        let mut rng = pool.stream(StreamKind::MaskSample, 0);
        let n = 100_000;
        let l = 1.0f64;
        let mut hits = 0usize;
        for _ in 0..n {
            let s = (l - gumbel_noise(&mut rng)).sigmoid();
            if s > 0.5 {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let expect = l.sigmoid();
        assert!((p - expect).abs() < 0.005, "P(s>0.5) = {p}, expected {expect}");
    }

    #[test]
    fn sampling_law_equivalence_zero_mismatches() {
        // With shared (U1, U2): s > 0.5  <=>  U2^(e^l) < U1.
        let pool = SeedPool::new(13);
        let mut rng = pool.stream(StreamKind::MaskSample, 0);
        for &l in &[-2.0f64, -0.5, 0.0, 1.0, 3.0] {
            for _ in 0..20_000 {
                let u1 = rng.uniform_open();
                let u2 = rng.uniform_open();
                let s = (l - gumbel_noise_from(u1, u2)).sigmoid();
                let b = s > 0.5;
                let oracle = u2.powf(l.exp()) < u1;
                assert_eq!(b, oracle, "mismatch at l={l}, u1={u1}, u2={u2}");
            }
        }
    }

    #[test]
    fn threshold_is_strict_at_zero() {
        let params = toy_params();
        let mut m = MaskSet::init(&params, 0.9, &[], "t").unwrap();
        let l = m.logits_mut("layer0.bias").unwrap();
        l.data_mut().copy_from_slice(&[2.197, -1.0, 0.0]);
        let bits = m.threshold();
        assert_eq!(bits.bits("layer0.bias").unwrap(), &[true, false, false]);
    }

    #[test]
    fn invert_is_involution_and_partitions() {
        let params = toy_params();
        let mut m = MaskSet::init(&params, 0.9, &[], "t").unwrap();
        let pool = SeedPool::new(2);
        let mut rng = pool.stream(StreamKind::MaskSample, 0);
        for (_, l) in m.entries_mut() {
            for x in l.data_mut() {
                *x = rng.uniform_symmetric(3.0);
            }
        }
        let bits = m.threshold();
        let inv = bits.invert();
        assert_eq!(inv.invert().entries.len(), bits.entries.len());
        for ((n1, _, b1), (n2, _, b2)) in bits.entries.iter().zip(inv.invert().entries.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(b1, b2);
        }
        // M and not-M are disjoint and cover everything
        assert_eq!(bits.kept() + inv.kept(), bits.total());
        for ((_, _, b), (_, _, nb)) in bits.entries.iter().zip(inv.entries.iter()) {
            for (x, y) in b.iter().zip(nb) {
                assert!(x ^ y);
            }
        }
    }

    #[test]
    fn apply_all_ones_is_identity_and_pattern_zeroes() {
        let mut params = ParamStore::new();
        params
            .insert("w", 0, Tensor::new(vec![3], vec![1.0f64, -2.0, 3.0]).unwrap())
            .unwrap();
        let ones = BinaryMask::new(vec![("w".into(), 0, vec![true, true, true])], "ones");
        let masked = ones.apply(&params).unwrap();
        assert!(masked.get("w").unwrap().tensor.bitwise_eq(&params.get("w").unwrap().tensor));

        let pattern = BinaryMask::new(vec![("w".into(), 0, vec![true, false, true])], "p");
        let masked = pattern.apply(&params).unwrap();
        assert_eq!(masked.get("w").unwrap().tensor.data(), &[1.0, 0.0, 3.0]);
        // original untouched
        assert_eq!(params.get("w").unwrap().tensor.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn apply_rejects_misaligned_mask() {
        let params = toy_params();
        let bad = BinaryMask::new(vec![("layer0.weight".into(), 0, vec![true; 5])], "bad");
        assert!(bad.apply(&params).is_err());
    }

    #[test]
    fn regularizer_value_and_exact_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", 0, Tensor::zeros(&[3])).unwrap();
        let mut m = MaskSet::init(&params, 0.5, &[], "r").unwrap();
        m.logits_mut("w").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);

        assert!((m.regularizer(1e-4) - 6e-4).abs() < 1e-18);
        assert_eq!(m.regularizer(0.0), 0.0);

        let zero = MaskSet::init(&params, 0.5, &[], "z").unwrap();
        assert_eq!(zero.regularizer(123.0), 0.0);

        let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
        m.add_regularizer_grads(&mut grads, 1e-4);
        for &g in grads["w"].data() {
            assert_eq!(g, 1e-4); // exactly alpha
        }
    }

    #[test]
    fn biased_reinit_uses_both_probabilities() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("w", 0, Tensor::zeros(&[4])).unwrap();
        let mut m = MaskSet::init(&params, 0.9, &[], "next").unwrap();
        let prev = BinaryMask::new(vec![("w".into(), 0, vec![true, false, true, false])], "prev");

        m.biased_reinit(&prev, 0.88, 0.27).unwrap();
        let l = m.logits("w").unwrap().data();
        assert!((l[0] - 1.992).abs() < 1e-3, "logit(0.88) = {}", l[0]);
        assert!((l[1] - (-0.9946)).abs() < 1e-3, "logit(0.27) = {}", l[1]);

        m.biased_reinit(&prev, 0.88, 0.5).unwrap();
        assert_eq!(m.logits("w").unwrap().data()[1], 0.0);

        assert!(m.biased_reinit(&prev, 0.5, 0.88).is_err());
    }

    #[test]
    fn fixed_bits_override_threshold_and_regularizer() {
        let params = toy_params();
        let mut m = MaskSet::init(&params, 0.9, &[], "loo").unwrap();
        m.fix_bits("layer1.weight", vec![true, false, true, false, true, false])
            .unwrap();
        let bits = m.threshold();
        assert_eq!(
            bits.bits("layer1.weight").unwrap(),
            &[true, false, true, false, true, false]
        );
        // logits of fixed params do not appear in the regularizer:
        // layer0 weight (6) + bias (3) = 9 trainable logits remain
        let expected = 9.0 * logit(0.9);
        assert!((m.regularizer(1.0) - expected).abs() < 1e-9);
        assert!(!m.is_trainable("layer1.weight"));
        assert!(m.is_trainable("layer0.weight"));
    }

    #[test]
    fn batch_split_shapes() {
        assert_eq!(split_batch_sizes(128, 4).unwrap(), vec![32, 32, 32, 32]);
        assert_eq!(split_batch_sizes(10, 4).unwrap(), vec![3, 3, 2, 2]);
        assert_eq!(split_batch_sizes(7, 1).unwrap(), vec![7]);
        assert!(split_batch_sizes(3, 4).is_err());
        assert!(split_batch_sizes(3, 0).is_err());
    }

    #[test]
    fn masked_weight_node_flows_gradient_to_logits() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.constant(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let l = g.leaf(Tensor::new(vec![2], vec![2.0, 2.0]).unwrap(), true);
        let noise = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let (masked, soft) = masked_weight_node(&mut g, w, l, noise, 1.0).unwrap();
        // logit 2, noise 0 -> s = sigmoid(2) > 0.5 -> bit 1 -> w' = w
        assert_eq!(g.value(masked).data(), &[3.0, -2.0]);
        assert!(g.value(soft).data().iter().all(|&s| s > 0.5));

        let loss = g.sum_all(masked).unwrap();
        let grads = g.backward(loss).unwrap();
        // d loss / d l = w * ds/dl = w * s(1-s)
        let s = 2.0f64.sigmoid();
        let expect = [3.0 * s * (1.0 - s), -2.0 * s * (1.0 - s)];
        let got = grads.get(l).unwrap().data();
        assert!((got[0] - expect[0]).abs() < 1e-12);
        assert!((got[1] - expect[1]).abs() < 1e-12);
    }
}
