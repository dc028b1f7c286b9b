//! Multibox objective with online hard negative mining.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::priors::MatchResult;
use crate::tensor::{Float, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("multibox_loss: {0}")]
    Shape(String),
    #[error("multibox_loss: non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid OHNM ratio {0:?}: expected `pos:neg` with neg >= pos >= 1")]
    Ratio(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Positive to negative ratio of hard negative mining, written `1:3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OhnmRatio {
    pub positives: usize,
    pub negatives: usize,
}

impl OhnmRatio {
    pub fn new(positives: usize, negatives: usize) -> Result<Self, LossError> {
        if positives == 0 || negatives < positives {
            return Err(LossError::Ratio(format!("{positives}:{negatives}")));
        }
        Ok(OhnmRatio { positives, negatives })
    }

    /// Largest number of negatives allowed for `pos` positives.
    pub fn cap(&self, pos: usize) -> usize {
        pos * self.negatives / self.positives
    }
}

impl Default for OhnmRatio {
    fn default() -> Self {
        OhnmRatio { positives: 1, negatives: 3 }
    }
}

impl fmt::Display for OhnmRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.positives, self.negatives)
    }
}

impl FromStr for OhnmRatio {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, LossError> {
        let bad = || LossError::Ratio(s.to_string());
        let (p, n) = s.trim().split_once(':').ok_or_else(bad)?;
        let p = p.trim().parse().map_err(|_| bad())?;
        let n = n.trim().parse().map_err(|_| bad())?;
        OhnmRatio::new(p, n).map_err(|_| bad())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub ohnm_ratio: OhnmRatio,
    pub localization_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { ohnm_ratio: OhnmRatio::default(), localization_weight: 1.0 }
    }
}

pub struct LossOutput {
    /// Scalar `(L_conf + w * L_loc) / N`, connected to the inputs.
    pub total: Var,
    /// `L_conf / N`, for logging.
    pub conf: f64,
    /// `w * L_loc / N`, for logging.
    pub loc: f64,
    /// Matched priors in the batch.
    pub n_matched: usize,
    /// Mined negatives per image, hardest first.
    pub negatives: Vec<Vec<usize>>,
}

/// Background-class cross-entropy `logsumexp(x) - x_0` of each row.
pub fn background_loss<T: Float>(logits: &[T], classes: usize) -> Vec<f64> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
            let s: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            m + s.ln() - row[0].as_f64()
        })
        .collect()
}

/// Unmatched priors of one image ranked by background loss, descending, ties
/// by lower index, truncated to `cap`.
pub fn mine_negatives(bg_loss: &[f64], matched: &MatchResult, cap: usize) -> Vec<usize> {
    let mut neg: Vec<usize> = (0..bg_loss.len()).filter(|&i| matched.matched_gt[i].is_none()).collect();
    neg.sort_by(|&a, &b| bg_loss[b].total_cmp(&bg_loss[a]).then(a.cmp(&b)));
    neg.truncate(cap);
    neg
}

pub fn multibox_loss<T: Float>(
    g: &mut Graph<T>,
    loc: Var,
    conf: Var,
    matches: &[MatchResult],
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    let (n, p, k) = match (g.shape(loc), g.shape(conf)) {
        (&[n, p, 4], &[n2, p2, k]) if n == n2 && p == p2 => (n, p, k),
        (l, c) => return Err(LossError::Shape(format!("loc {l:?} and conf {c:?} must be [N, P, 4] and [N, P, K]"))),
    };
    if matches.len() != n {
        return Err(LossError::Shape(format!("{} match results for batch of {n}", matches.len())));
    }
    for (i, m) in matches.iter().enumerate() {
        if m.matched_gt.len() != p || m.class_targets.len() != p || m.encoded_targets.len() != p {
            return Err(LossError::Shape(format!("image {i}: match result does not cover {p} priors")));
        }
        if let Some(&c) = m.class_targets.iter().find(|&&c| c >= k) {
            return Err(LossError::Shape(format!("image {i}: class {c} out of range for {k} classes")));
        }
    }
    if !g.value(loc).all_finite() {
        return Err(LossError::NonFinite("loc predictions"));
    }
    if !g.value(conf).all_finite() {
        return Err(LossError::NonFinite("conf predictions"));
    }
    let flat_loc = g.reshape(loc, &[n * p, 4])?;
    let flat_conf = g.reshape(conf, &[n * p, k])?;
    let n_matched: usize = matches.iter().map(|m| m.positives().count()).sum();

    if n_matched == 0 {
        let a = g.sum(flat_loc);
        let b = g.sum(flat_conf);
        let s = g.add(a, b)?;
        let total = g.scale(s, T::zero());
        return Ok(LossOutput { total, conf: 0.0, loc: 0.0, n_matched, negatives: vec![Vec::new(); n] });
    }

    let mut conf_rows = Vec::new();
    let mut conf_labels = Vec::new();
    let mut loc_rows = Vec::new();
    let mut loc_targets = Vec::new();
    let mut negatives = Vec::with_capacity(n);
    for (i, m) in matches.iter().enumerate() {
        let base = i * p;
        let pos: Vec<usize> = m.positives().collect();
        for &j in &pos {
            conf_rows.push(base + j);
            conf_labels.push(m.class_targets[j]);
            loc_rows.push(base + j);
            loc_targets.extend(m.encoded_targets[j].iter().map(|&v| T::from_f64_lossy(v)));
        }
        let bg = background_loss(&g.value(conf).data()[base * k..(base + p) * k], k);
        let neg = mine_negatives(&bg, m, cfg.ohnm_ratio.cap(pos.len()));
        g.note_branch(&(i, &neg));
        for &j in &neg {
            conf_rows.push(base + j);
            conf_labels.push(0);
        }
        negatives.push(neg);
    }

    let logits = g.gather_rows(flat_conf, &conf_rows)?;
    let ce = g.softmax_cross_entropy(logits, &conf_labels)?;
    let l_conf = g.sum(ce);
    let pred = g.gather_rows(flat_loc, &loc_rows)?;
    let target = g.constant(Tensor::new(&[loc_rows.len(), 4], loc_targets)?);
    let sl1 = g.smooth_l1(pred, target)?;
    let l_loc = g.sum(sl1);
    let l_loc = g.scale(l_loc, T::from_f64_lossy(cfg.localization_weight));
    let both = g.add(l_conf, l_loc)?;
    let inv_n = 1.0 / n_matched as f64;
    let total = g.scale(both, T::from_f64_lossy(inv_n));
    let conf_val = g.value(l_conf).data()[0].as_f64() * inv_n;
    let loc_val = g.value(l_loc).data()[0].as_f64() * inv_n;
    Ok(LossOutput { total, conf: conf_val, loc: loc_val, n_matched, negatives })
}
