//! Per-instance feature statistics, their uncertainty, and the per-sample
//! history of statistics across epochs.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use uad_autograd::{Tensor, Var};

use crate::error::{Result, UadError};

/// Channel mean `(B, D)`, covariance `(B, D, D)` and std `(B, D)`, all
/// differentiable with respect to the features they came from.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mu: Var,
    pub cov: Var,
    pub sigma: Var,
}

/// Detached `(mu, sigma)` of one instance; the unit stored in history.
#[derive(Clone, Debug, PartialEq)]
pub struct StatSummary {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FeatureStats {
    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }

    /// Detached summaries, one per instance.
    pub fn summaries(&self) -> Vec<StatSummary> {
        let d = self.dim();
        let mu = self.mu.value().data();
        let sigma = self.sigma.value().data();
        (0..self.batch())
            .map(|i| StatSummary {
                mu: mu[i * d..(i + 1) * d].to_vec(),
                sigma: sigma[i * d..(i + 1) * d].to_vec(),
            })
            .collect()
    }
}

/// Channel statistics over spatial positions of a `(B, D, H, W)` block.
pub fn feature_stats(f: &Var) -> Result<FeatureStats> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(UadError::Shape {
            expected: "(B, D, H, W)".into(),
            got: s.to_vec(),
        });
    }
    let (b, d, n) = (s[0], s[1], s[2] * s[3]);
    if n < 2 {
        return Err(UadError::InvalidArgument(format!(
            "feature statistics need H*W >= 2, got {}x{}",
            s[2], s[3]
        )));
    }
    if !f.value().all_finite() {
        return Err(UadError::NonFinite("features passed to feature_stats".into()));
    }
    let flat = f.reshape(&[b, d, n]);
    let mean = flat.mean_keepdim(&[2]);
    let centered = flat.sub(&mean);
    let gram = centered.matmul(&centered.transpose_last()).scale(1.0 / n as f64);
    let cov = gram.add(&gram.transpose_last()).scale(0.5);
    let sigma = cov.diag().sqrt();
    Ok(FeatureStats {
        mu: mean.reshape(&[b, d]),
        cov,
        sigma,
    })
}

/// Spread of `mu` and `sigma` across a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUncertainty {
    pub std_mu: Vec<f64>,
    pub std_sigma: Vec<f64>,
}

impl StatUncertainty {
    pub fn zeros(dim: usize) -> Self {
        Self {
            std_mu: vec![0.0; dim],
            std_sigma: vec![0.0; dim],
        }
    }
}

/// Element-wise population standard deviation of `mu` and `sigma`.
pub fn stat_uncertainty(samples: &[StatSummary]) -> Result<StatUncertainty> {
    let first = samples
        .first()
        .ok_or_else(|| UadError::InvalidArgument("stat_uncertainty needs at least one sample".into()))?;
    let d = first.mu.len();
    if samples.iter().any(|s| s.mu.len() != d || s.sigma.len() != d) {
        return Err(UadError::InvalidArgument("samples differ in dimension".into()));
    }
    let std = |get: fn(&StatSummary) -> &[f64]| -> Vec<f64> {
        let n = samples.len() as f64;
        (0..d)
            .map(|k| {
                let mean = samples.iter().map(|s| get(s)[k]).sum::<f64>() / n;
                let var = samples.iter().map(|s| (get(s)[k] - mean).powi(2)).sum::<f64>() / n;
                var.sqrt()
            })
            .collect()
    };
    Ok(StatUncertainty {
        std_mu: std(|s| &s.mu),
        std_sigma: std(|s| &s.sigma),
    })
}

/// Stack per-instance uncertainties into `(B, D)` tensors `(std_mu, std_sigma)`.
pub fn stack_uncertainty(items: &[StatUncertainty]) -> (Tensor, Tensor) {
    let b = items.len();
    let d = items.first().map_or(0, |u| u.std_mu.len());
    let mu = items.iter().flat_map(|u| u.std_mu.iter().copied()).collect();
    let sigma = items.iter().flat_map(|u| u.std_sigma.iter().copied()).collect();
    (Tensor::new(&[b, d], mu), Tensor::new(&[b, d], sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Adv,
    Benign,
}

#[derive(Clone, Debug, PartialEq)]
struct EpochEntry {
    epoch: u32,
    adv: Option<Vec<StatSummary>>,
    benign: Option<StatSummary>,
}

/// Per-sample buffers of the last `kappa_h` epochs of statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStore {
    kappa_h: usize,
    adv_per_epoch: usize,
    dim: usize,
    samples: BTreeMap<u64, VecDeque<EpochEntry>>,
}

const HISTORY_MAGIC: &[u8; 8] = b"UADHIST1";

impl HistoryStore {
    /// `adv_per_epoch` is the number of intermediate adversaries kept per
    /// epoch on the ADV track (1 in single-step mode).
    pub fn new(kappa_h: usize, adv_per_epoch: usize, dim: usize) -> Result<Self> {
        if kappa_h == 0 || adv_per_epoch == 0 || dim == 0 {
            return Err(UadError::InvalidArgument(
                "history capacity, adversaries per epoch and dimension must be positive".into(),
            ));
        }
        Ok(Self {
            kappa_h,
            adv_per_epoch,
            dim,
            samples: BTreeMap::new(),
        })
    }

    pub fn kappa_h(&self) -> usize {
        self.kappa_h
    }

    pub fn adv_per_epoch(&self) -> usize {
        self.adv_per_epoch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, sample_id: u64, epoch: u32, track: Track, stats: Vec<StatSummary>) -> Result<()> {
        let expected = match track {
            Track::Adv => self.adv_per_epoch,
            Track::Benign => 1,
        };
        if stats.len() != expected {
            return Err(UadError::History(format!(
                "{track:?} push for sample {sample_id} needs {expected} entries, got {}",
                stats.len()
            )));
        }
        if stats
            .iter()
            .any(|s| s.mu.len() != self.dim || s.sigma.len() != self.dim)
        {
            return Err(UadError::History(format!("entries must have dimension {}", self.dim)));
        }
        let buf = self.samples.entry(sample_id).or_default();
        if buf.back().is_none_or(|e| e.epoch < epoch) {
            buf.push_back(EpochEntry {
                epoch,
                adv: None,
                benign: None,
            });
            while buf.len() > self.kappa_h {
                buf.pop_front();
            }
        }
        let entry = buf.back_mut().expect("entry exists");
        if entry.epoch != epoch {
            return Err(UadError::History(format!(
                "push for sample {sample_id} at epoch {epoch} after epoch {}",
                entry.epoch
            )));
        }
        match track {
            Track::Adv if entry.adv.is_none() => entry.adv = Some(stats),
            Track::Benign if entry.benign.is_none() => entry.benign = stats.into_iter().next(),
            _ => {
                return Err(UadError::History(format!(
                    "duplicate {track:?} push for sample {sample_id} at epoch {epoch}"
                )))
            }
        }
        Ok(())
    }

    /// Entries of epochs in `[t - kappa_h, t - 1]` as `(adv, benign)`.
    pub fn query(&self, sample_id: u64, t: u32) -> (Vec<StatSummary>, Vec<StatSummary>) {
        let lo = t.saturating_sub(self.kappa_h as u32);
        let mut adv = Vec::new();
        let mut benign = Vec::new();
        if let Some(buf) = self.samples.get(&sample_id) {
            for e in buf.iter().filter(|e| e.epoch >= lo && e.epoch < t) {
                if let Some(a) = &e.adv {
                    adv.extend(a.iter().cloned());
                }
                if let Some(b) = &e.benign {
                    benign.push(b.clone());
                }
            }
        }
        (adv, benign)
    }

    /// Epochs currently held for `sample_id`, oldest first.
    pub fn epochs(&self, sample_id: u64) -> Vec<u32> {
        self.samples
            .get(&sample_id)
            .map(|b| b.iter().map(|e| e.epoch).collect())
            .unwrap_or_default()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Number of stored floats for one sample.
    pub fn float_count(&self, sample_id: u64) -> usize {
        self.samples.get(&sample_id).map_or(0, |buf| {
            buf.iter()
                .map(|e| (e.adv.as_ref().map_or(0, Vec::len) + usize::from(e.benign.is_some())) * 2 * self.dim)
                .sum()
        })
    }

    pub fn total_float_count(&self) -> usize {
        self.samples.keys().map(|&id| self.float_count(id)).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(HISTORY_MAGIC)?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.kappa_h as u64)?;
        w.write_u64::<LittleEndian>(self.adv_per_epoch as u64)?;
        w.write_u64::<LittleEndian>(self.dim as u64)?;
        w.write_u64::<LittleEndian>(self.samples.len() as u64)?;
        let write_summary = |w: &mut dyn Write, s: &StatSummary| -> std::io::Result<()> {
            for v in s.mu.iter().chain(&s.sigma) {
                w.write_f64::<LittleEndian>(*v)?;
            }
            Ok(())
        };
        for (id, buf) in &self.samples {
            w.write_u64::<LittleEndian>(*id)?;
            w.write_u32::<LittleEndian>(buf.len() as u32)?;
            for e in buf {
                w.write_u32::<LittleEndian>(e.epoch)?;
                w.write_u8(u8::from(e.adv.is_some()) | (u8::from(e.benign.is_some()) << 1))?;
                for s in e.adv.iter().flatten() {
                    write_summary(w, s)?;
                }
                if let Some(s) = &e.benign {
                    write_summary(w, s)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| UadError::History(format!("corrupt history block: {m}"));
        let io = |e| UadError::io("reading history block", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != HISTORY_MAGIC {
            return Err(bad("bad magic"));
        }
        if r.read_u32::<LittleEndian>().map_err(io)? != 1 {
            return Err(bad("unsupported version"));
        }
        let kappa_h = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let adv_per_epoch = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(io)?;
        let mut store = Self::new(kappa_h, adv_per_epoch, dim).map_err(|_| bad("invalid header"))?;
        let read_summary = |r: &mut dyn Read| -> Result<StatSummary> {
            let mut v = vec![0.0; 2 * dim];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(io)?;
            let sigma = v.split_off(dim);
            Ok(StatSummary { mu: v, sigma })
        };
        for _ in 0..n {
            let id = r.read_u64::<LittleEndian>().map_err(io)?;
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            if len > kappa_h {
                return Err(bad("buffer longer than capacity"));
            }
            let mut buf = VecDeque::with_capacity(len);
            for _ in 0..len {
                let epoch = r.read_u32::<LittleEndian>().map_err(io)?;
                let flags = r.read_u8().map_err(io)?;
                let adv = if flags & 1 != 0 {
                    Some(
                        (0..adv_per_epoch)
                            .map(|_| read_summary(r))
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                let benign = if flags & 2 != 0 { Some(read_summary(r)?) } else { None };
                buf.push_back(EpochEntry { epoch, adv, benign });
            }
            store.samples.insert(id, buf);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use uad_autograd::grad;

    fn summary(v: f64, d: usize) -> StatSummary {
        StatSummary {
            mu: vec![v; d],
            sigma: vec![v + 1.0; d],
        }
    }

    fn oracle_cov(f: &Tensor, b: usize) -> (Vec<f64>, Vec<f64>) {
        let s = f.shape();
        let (d, n) = (s[1], s[2] * s[3]);
        let at = |c: usize, p: usize| f.data()[(b * d + c) * n + p];
        let mu: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|p| at(c, p)).sum::<f64>() / n as f64)
            .collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += (at(i, p) - mu[i]) * (at(j, p) - mu[j]);
                }
                cov[i * d + j] = acc / n as f64;
            }
        }
        (mu, cov)
    }

    #[test]
    fn constant_maps_have_zero_spread() {
        let f = Tensor::from_fn(&[1, 3, 2, 2], |i| (i / 4) as f64 + 0.5);
        let st = feature_stats(&Var::constant(f)).unwrap();
        assert_eq!(st.mu.value().data(), &[0.5, 1.5, 2.5]);
        assert!(st.cov.value().data().iter().all(|&v| v == 0.0));
        assert!(st.sigma.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_position_rejected() {
        let f = Var::constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(feature_stats(&f), Err(UadError::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let mut t = Tensor::zeros(&[1, 2, 2, 2]);
        t.data_mut()[0] = f64::INFINITY;
        assert!(matches!(feature_stats(&Var::constant(t)), Err(UadError::NonFinite(_))));
    }

    #[test]
    fn matches_loop_oracle_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::from_fn(&[2, 5, 3, 4], |_| rng.gen_range(-2.0..2.0));
        let st = feature_stats(&Var::constant(f.clone())).unwrap();
        let d = 5;
        for b in 0..2 {
            let (mu, cov) = oracle_cov(&f, b);
            for i in 0..d {
                assert!((st.mu.value().data()[b * d + i] - mu[i]).abs() < 1e-12);
                let sig = st.sigma.value().data()[b * d + i];
                let cii = st.cov.value().data()[b * d * d + i * d + i];
                assert!((sig * sig - cii).abs() <= 4.0 * f64::EPSILON * cii.max(1.0));
                for j in 0..d {
                    let c = st.cov.value().data()[b * d * d + i * d + j];
                    assert!((c - cov[i * d + j]).abs() < 1e-12);
                    assert_eq!(c, st.cov.value().data()[b * d * d + j * d + i]);
                }
            }
        }
    }

    #[test]
    fn mean_and_cov_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f0 = Tensor::from_fn(&[1, 3, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let wm = Tensor::from_fn(&[1, 3], |i| 0.4 * i as f64 - 0.3);
        let wc = Tensor::from_fn(&[1, 3, 3], |i| ((i * 7) % 5) as f64 * 0.2 - 0.4);
        let obj = |f: &Var| {
            let st = feature_stats(f).unwrap();
            st.mu
                .mul(&Var::constant(wm.clone()))
                .sum()
                .add(&st.cov.mul(&Var::constant(wc.clone())).sum())
                .add(&st.sigma.sum())
        };
        let fv = Var::parameter(f0.clone());
        let g = grad(&obj(&fv), &[&fv], false)[0].clone().unwrap();
        for i in 0..f0.len() {
            let h = 1e-5;
            let mut p = f0.clone();
            p.data_mut()[i] += h;
            let mut q = f0.clone();
            q.data_mut()[i] -= h;
            let num = (obj(&Var::constant(p)).item() - obj(&Var::constant(q)).item()) / (2.0 * h);
            let ana = g.value().data()[i];
            assert!(
                (ana - num).abs() <= 1e-3 * ana.abs().max(num.abs()).max(1e-3),
                "{i}: {ana} vs {num}"
            );
        }
    }

    #[test]
    fn uncertainty_degenerate_and_two_point_cases() {
        let u = stat_uncertainty(&[summary(0.3, 4)]).unwrap();
        assert_eq!(u, StatUncertainty::zeros(4));
        let u = stat_uncertainty(&[summary(0.0, 3), summary(2.0, 3)]).unwrap();
        assert_eq!(u.std_mu, vec![1.0; 3]);
        assert_eq!(u.std_sigma, vec![1.0; 3]);
        assert!(stat_uncertainty(&[]).is_err());
    }

    proptest! {
        #[test]
        fn uncertainty_is_permutation_invariant(
            vals in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 1..15),
            rot in 0usize..15,
        ) {
            let samples: Vec<StatSummary> = vals
                .iter()
                .map(|v| StatSummary { mu: v[..3].to_vec(), sigma: v[3..].to_vec() })
                .collect();
            let mut shuffled = samples.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let a = stat_uncertainty(&samples).unwrap();
            let b = stat_uncertainty(&shuffled).unwrap();
            for (x, y) in a.std_mu.iter().chain(&a.std_sigma).zip(b.std_mu.iter().chain(&b.std_sigma)) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ring_buffer_keeps_last_epochs() {
        let mut h = HistoryStore::new(3, 2, 2).unwrap();
        assert_eq!(h.query(7, 1), (vec![], vec![]));
        for e in 1..=4 {
            h.push(7, e, Track::Adv, vec![summary(e as f64, 2), summary(e as f64, 2)])
                .unwrap();
            h.push(7, e, Track::Benign, vec![summary(-(e as f64), 2)]).unwrap();
        }
        assert_eq!(h.epochs(7), vec![2, 3, 4]);
        let (adv, ben) = h.query(7, 5);
        assert_eq!(adv.len(), 6);
        assert_eq!(ben.len(), 3);
        // range contract: at t = 4 only epochs 1..=3 qualify, and 1 was evicted
        let (adv, _) = h.query(7, 4);
        assert!(adv.iter().all(|s| s.mu[0] == 2.0 || s.mu[0] == 3.0));
        assert_eq!(h.query(7, 1), (vec![], vec![]));
        assert_eq!(h.float_count(7), 3 * (2 + 1) * 2 * 2);
    }

    #[test]
    fn duplicate_and_out_of_order_pushes_rejected() {
        let mut h = HistoryStore::new(3, 1, 2).unwrap();
        h.push(1, 2, Track::Adv, vec![summary(0.0, 2)]).unwrap();
        assert!(h.push(1, 2, Track::Adv, vec![summary(0.0, 2)]).is_err());
        assert!(h.push(1, 1, Track::Benign, vec![summary(0.0, 2)]).is_err());
        assert!(h
            .push(1, 3, Track::Adv, vec![summary(0.0, 2), summary(0.0, 2)])
            .is_err());
        assert!(h.push(1, 3, Track::Benign, vec![summary(0.0, 3)]).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let mut h = HistoryStore::new(2, 2, 3).unwrap();
        for id in [4u64, 9] {
            for e in 1..=3 {
                h.push(
                    id,
                    e,
                    Track::Adv,
                    vec![summary(0.1 * e as f64, 3), summary(id as f64, 3)],
                )
                .unwrap();
            }
        }
        h.push(9, 3, Track::Benign, vec![summary(1.5, 3)]).unwrap();
        let mut bytes = Vec::new();
        h.write_to(&mut bytes).unwrap();
        let back = HistoryStore::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, h);
        bytes[0] = b'X';
        assert!(HistoryStore::read_from(&mut bytes.as_slice()).is_err());
    }
}
