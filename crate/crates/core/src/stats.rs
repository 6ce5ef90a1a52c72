//! Detection statistics: bit accuracy, the exact null false-positive rate of
//! matched-bit counts, empirical TPR at a fixed FPR, and multi-user
//! identification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::spatial::WatermarkBits;

/// Hard decision on vote means: `≥ 0.5` reads as 1.
pub fn decide(estimate: &[f64]) -> Vec<u8> {
    estimate.iter().map(|&e| (e >= 0.5) as u8).collect()
}

pub fn matched_bits(estimate: &[f64], bits: &WatermarkBits) -> Result<usize> {
    if estimate.len() != bits.len() {
        return Err(Error::LengthMismatch {
            expected: bits.len(),
            actual: estimate.len(),
        });
    }
    Ok(estimate
        .iter()
        .zip(bits.as_slice())
        .filter(|(&e, &b)| ((e >= 0.5) as u8) == b)
        .count())
}

pub fn bit_accuracy(estimate: &[f64], bits: &WatermarkBits) -> Result<f64> {
    Ok(matched_bits(estimate, bits)? as f64 / bits.len() as f64)
}

/// Probability that an unwatermarked `l`-bit read matches more than `tau`
/// bits, each bit a fair coin: `Σ_{i>τ} C(l,i)/2^l = I_{1/2}(τ+1, l−τ)`.
pub fn fpr_exact(tau: usize, l: usize) -> Result<f64> {
    if l == 0 || tau > l {
        return Err(Error::InvalidParameter(format!("threshold {tau} outside [0, {l}]")));
    }
    if tau == l {
        return Ok(0.0);
    }
    Ok(beta_reg((tau + 1) as f64, (l - tau) as f64, 0.5))
}

/// Matched-bit threshold controlling the (user-scaled) false-positive rate.
/// A read is accepted when its match count exceeds `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub l: usize,
    pub target_fpr: f64,
    pub n_users: usize,
    pub tau: usize,
}

impl ThresholdPolicy {
    pub fn accepts(&self, matches: usize) -> bool {
        matches > self.tau
    }

    /// Expected false-positive rate of the policy, scaled by the user count.
    pub fn expected_fpr(&self) -> f64 {
        self.n_users as f64 * fpr_exact(self.tau, self.l).unwrap_or(0.0)
    }
}

/// Smallest `tau` with `n_users · FPR(tau) ≤ target_fpr`.
pub fn choose_threshold(l: usize, target_fpr: f64, n_users: usize) -> Result<ThresholdPolicy> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidParameter(format!("target FPR {target_fpr} outside (0, 1)")));
    }
    if n_users == 0 || l == 0 {
        return Err(Error::InvalidParameter("need l ≥ 1 and at least one user".into()));
    }
    let per_user = target_fpr / n_users as f64;
    // FPR is non-increasing in tau and FPR(l) = 0, so a bisection finds the
    // first admissible tau.
    let (mut lo, mut hi) = (0usize, l);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if fpr_exact(mid, l)? <= per_user {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(ThresholdPolicy {
        l,
        target_fpr,
        n_users,
        tau: lo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub tpr_at_fpr: f64,
    pub auc: f64,
    /// Scores strictly above this are called positive.
    pub threshold: f64,
}

/// Empirical TPR at a fixed FPR and ROC AUC.
///
/// The threshold is the `(1 − fpr)` quantile of the negatives, placed so
/// that at most `⌊fpr · n_neg⌋` negatives score strictly above it.
pub fn evaluate(pos: &[f64], neg: &[f64], fpr: f64) -> Result<Evaluation> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidParameter("evaluation needs positives and negatives".into()));
    }
    if !(0.0..1.0).contains(&fpr) {
        return Err(Error::InvalidParameter(format!("FPR {fpr} outside [0, 1)")));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let allowed = (fpr * neg.len() as f64).floor() as usize;
    let threshold = sorted[allowed.min(sorted.len() - 1)];
    let tpr = pos.iter().filter(|&&p| p > threshold).count() as f64 / pos.len() as f64;
    Ok(Evaluation {
        tpr_at_fpr: tpr,
        auc: auc(pos, neg),
        threshold,
    })
}

/// Mann–Whitney estimate of `P(pos > neg) + ½·P(pos = neg)`.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&p| (p, true))
        .chain(neg.iter().map(|&n| (n, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Midranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisteredUser {
    pub user_id: u32,
    pub key: WatermarkBits,
}

#[derive(Serialize, Deserialize)]
struct UserRecord {
    user_id: u32,
    key_hex: String,
}

/// Per-user XOR keys; user `u` embeds `ω_u = ω ⊕ κ_u`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserRegistry {
    users: Vec<RegisteredUser>,
}

impl UserRegistry {
    pub fn new(users: Vec<RegisteredUser>) -> Result<Self> {
        let mut ids: Vec<u32> = users.iter().map(|u| u.user_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("duplicate user id".into()));
        }
        let mut keys: Vec<&WatermarkBits> = users.iter().map(|u| &u.key).collect();
        keys.sort_by(|a, b| a.as_slice().cmp(b.as_slice()));
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("user keys must be distinct".into()));
        }
        if let Some(first) = users.first() {
            if users.iter().any(|u| u.key.len() != first.key.len()) {
                return Err(Error::InvalidParameter("user keys differ in length".into()));
            }
        }
        Ok(UserRegistry { users })
    }

    /// `n` users with ids `0..n` and distinct random keys.
    pub fn generate(n: usize, l: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut users = Vec::with_capacity(n);
        while users.len() < n {
            let key = WatermarkBits::new((0..l).map(|_| rng.gen::<bool>() as u8).collect())?;
            if seen.insert(key.clone()) {
                users.push(RegisteredUser {
                    user_id: users.len() as u32,
                    key,
                });
            } else if l < 64 && seen.len() as u128 >= 1u128 << l {
                return Err(Error::InvalidParameter(format!("cannot draw {n} distinct {l}-bit keys")));
            }
        }
        UserRegistry::new(users)
    }

    pub fn users(&self) -> &[RegisteredUser] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn get(&self, user_id: u32) -> Option<&RegisteredUser> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn user_watermark(&self, user_id: u32, model: &WatermarkBits) -> Result<WatermarkBits> {
        let user = self
            .get(user_id)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown user {user_id}")))?;
        model.xor(&user.key)
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<UserRecord> = self
            .users
            .iter()
            .map(|u| UserRecord {
                user_id: u.user_id,
                key_hex: u.key.to_hex(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }

    pub fn from_json(text: &str, l: usize) -> Result<Self> {
        let records: Vec<UserRecord> = serde_json::from_str(text)?;
        let users = records
            .into_iter()
            .map(|r| {
                Ok(RegisteredUser {
                    user_id: r.user_id,
                    key: WatermarkBits::from_hex(&r.key_hex, l)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        UserRegistry::new(users)
    }
}

fn pack(bits: &[u8]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        words[i / 64] |= (b as u64) << (i % 64);
    }
    words
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    /// Best-matching user when its count clears the threshold.
    pub user: Option<u32>,
    /// Up to five best users with their match counts, best first.
    pub ranking: Vec<(u32, usize)>,
}

/// Registry with the per-user watermarks precomputed in packed form.
#[derive(Debug, Clone)]
pub struct Identifier {
    l: usize,
    ids: Vec<u32>,
    packed: Vec<Vec<u64>>,
}

impl Identifier {
    pub fn new(registry: &UserRegistry, model: &WatermarkBits) -> Result<Self> {
        if registry.is_empty() {
            return Err(Error::InvalidParameter("empty user registry".into()));
        }
        let mut users: Vec<&RegisteredUser> = registry.users().iter().collect();
        users.sort_by_key(|u| u.user_id);
        let packed = users
            .iter()
            .map(|u| Ok(pack(model.xor(&u.key)?.as_slice())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Identifier {
            l: model.len(),
            ids: users.iter().map(|u| u.user_id).collect(),
            packed,
        })
    }

    /// Matches between `decide(ω̃) ⊕ κ_u` and ω, i.e. between `decide(ω̃)`
    /// and `ω_u`, for every user in id order.
    pub fn match_counts(&self, estimate: &[f64]) -> Result<Vec<(u32, usize)>> {
        if estimate.len() != self.l {
            return Err(Error::LengthMismatch {
                expected: self.l,
                actual: estimate.len(),
            });
        }
        let read = pack(&decide(estimate));
        Ok(self
            .ids
            .iter()
            .zip(&self.packed)
            .map(|(&id, words)| {
                let diff: u32 = words.iter().zip(&read).map(|(a, b)| (a ^ b).count_ones()).sum();
                (id, self.l - diff as usize)
            })
            .collect())
    }

    pub fn identify(&self, estimate: &[f64], policy: &ThresholdPolicy) -> Result<Identification> {
        if policy.l != self.l {
            return Err(Error::LengthMismatch {
                expected: self.l,
                actual: policy.l,
            });
        }
        let mut counts = self.match_counts(estimate)?;
        // Stable sort keeps lower ids first among equal counts.
        counts.sort_by(|a, b| b.1.cmp(&a.1));
        let best = counts[0];
        counts.truncate(5);
        Ok(Identification {
            user: policy.accepts(best.1).then_some(best.0),
            ranking: counts,
        })
    }
}

pub fn identify(
    estimate: &[f64],
    registry: &UserRegistry,
    model: &WatermarkBits,
    policy: &ThresholdPolicy,
) -> Result<Identification> {
    Identifier::new(registry, model)?.identify(estimate, policy)
}
