//! Glicko-2 ratings from pairwise A/B judgments.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts between the Glicko and Glicko-2 scales.
pub const GLICKO2_SCALE: f64 = 173.7178;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_PERIOD_SIZE: usize = 10;
const VOLATILITY_TOLERANCE: f64 = 1e-6;
const VOLATILITY_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub rating: f64,
    pub deviation: f64,
    pub volatility: f64,
}

impl Default for Rating {
    fn default() -> Self {
        Self {
            rating: 1500.0,
            deviation: 350.0,
            volatility: 0.06,
        }
    }
}

impl Rating {
    pub fn new(rating: f64, deviation: f64, volatility: f64) -> Result<Self> {
        if !(deviation > 0.0) || !(volatility > 0.0) || !rating.is_finite() {
            return Err(Error::OutOfRange(format!(
                "rating {rating}, deviation {deviation}, volatility {volatility}"
            )));
        }
        Ok(Self {
            rating,
            deviation,
            volatility,
        })
    }

    fn mu(&self) -> f64 {
        (self.rating - 1500.0) / GLICKO2_SCALE
    }

    fn phi(&self) -> f64 {
        self.deviation / GLICKO2_SCALE
    }
}

fn g(phi: f64) -> f64 {
    1.0 / (1.0 + 3.0 * phi * phi / (std::f64::consts::PI * std::f64::consts::PI)).sqrt()
}

fn expected_score(mu: f64, mu_j: f64, phi_j: f64) -> f64 {
    1.0 / (1.0 + (-g(phi_j) * (mu - mu_j)).exp())
}

/// New volatility by the Illinois-variant regula falsi on the published
/// volatility equation.
fn new_volatility(sigma: f64, phi: f64, v: f64, delta: f64, tau: f64) -> Result<f64> {
    let a = (sigma * sigma).ln();
    let f = |x: f64| {
        let ex = x.exp();
        ex * (delta * delta - phi * phi - v - ex) / (2.0 * (phi * phi + v + ex).powi(2)) - (x - a) / (tau * tau)
    };
    let mut big_a = a;
    let mut big_b = if delta * delta > phi * phi + v {
        (delta * delta - phi * phi - v).ln()
    } else {
        let mut k = 1.0;
        while f(a - k * tau) < 0.0 {
            k += 1.0;
            if k > VOLATILITY_MAX_ITERS as f64 {
                return Err(Error::NoConvergence("volatility bracket search".into()));
            }
        }
        a - k * tau
    };
    let (mut f_a, mut f_b) = (f(big_a), f(big_b));
    let mut iters = 0;
    while (big_b - big_a).abs() > VOLATILITY_TOLERANCE {
        iters += 1;
        if iters > VOLATILITY_MAX_ITERS {
            return Err(Error::NoConvergence(format!(
                "volatility iteration after {VOLATILITY_MAX_ITERS} steps"
            )));
        }
        let c = big_a + (big_a - big_b) * f_a / (f_b - f_a);
        let f_c = f(c);
        if f_c * f_b <= 0.0 {
            big_a = big_b;
            f_a = f_b;
        } else {
            f_a /= 2.0;
        }
        big_b = c;
        f_b = f_c;
    }
    Ok((big_a / 2.0).exp())
}

/// One rating period for `player`. `games` pairs each opponent's
/// pre-period rating with the player's score (1 win, 0.5 tie, 0 loss).
/// Contributions are summed in a canonical order, so the result does not
/// depend on the order of `games`.
pub fn update_rating(player: Rating, games: &[(Rating, f64)], tau: f64) -> Result<Rating> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (mu, phi) = (player.mu(), player.phi());
    if games.is_empty() {
        return Ok(Rating {
            deviation: (phi * phi + player.volatility * player.volatility).sqrt() * GLICKO2_SCALE,
            ..player
        });
    }
    let mut sorted = games.to_vec();
    sorted.sort_by(|(x, s), (y, t)| {
        x.rating
            .total_cmp(&y.rating)
            .then(x.deviation.total_cmp(&y.deviation))
            .then(x.volatility.total_cmp(&y.volatility))
            .then(s.total_cmp(t))
    });
    let terms: Vec<(f64, f64, f64)> = sorted
        .iter()
        .map(|(opp, score)| {
            let g_j = g(opp.phi());
            (g_j, expected_score(mu, opp.mu(), opp.phi()), *score)
        })
        .collect();
    let v = 1.0 / terms.iter().map(|(g_j, e, _)| g_j * g_j * e * (1.0 - e)).sum::<f64>();
    let improvement: f64 = terms.iter().map(|(g_j, e, s)| g_j * (s - e)).sum();
    let delta = v * improvement;
    let sigma = new_volatility(player.volatility, phi, v, delta, tau)?;
    let phi_star = (phi * phi + sigma * sigma).sqrt();
    let phi_new = 1.0 / (1.0 / (phi_star * phi_star) + 1.0 / v).sqrt();
    let mu_new = mu + phi_new * phi_new * improvement;
    Ok(Rating {
        rating: GLICKO2_SCALE * mu_new + 1500.0,
        deviation: GLICKO2_SCALE * phi_new,
        volatility: sigma,
    })
}

/// One blind A/B judgment. `outcome` is 1 when `model_a` was preferred, 0
/// when `model_b` was, 0.5 for a tie.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub model_a: String,
    pub model_b: String,
    pub outcome: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl MatchRecord {
    pub fn validate(&self) -> Result<()> {
        if self.model_a == self.model_b {
            return Err(Error::Config(format!(
                "model {:?} compared against itself",
                self.model_a
            )));
        }
        if ![0.0, 0.5, 1.0].contains(&self.outcome) {
            return Err(Error::OutOfRange(format!(
                "outcome {} is not 0, 0.5 or 1",
                self.outcome
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model: String,
    pub rating: Rating,
    pub games: usize,
}

/// Rates every model in the log. The log is cut, in order, into rating
/// periods of `period_size` judgments; within a period all models update
/// simultaneously from their pre-period ratings, and models already seen
/// but idle in a period get the no-play deviation growth. The result is
/// sorted by rating (descending), ties by name.
pub fn rank(matches: &[MatchRecord], period_size: usize, tau: f64) -> Result<Vec<RankedModel>> {
    if period_size == 0 {
        return Err(Error::Config("period size must be positive".into()));
    }
    for m in matches {
        m.validate()?;
    }
    let mut ratings: BTreeMap<&str, (Rating, usize)> = BTreeMap::new();
    for period in matches.chunks(period_size) {
        for m in period {
            for name in [&m.model_a, &m.model_b] {
                ratings.entry(name).or_insert((Rating::default(), 0));
            }
        }
        let before: BTreeMap<&str, Rating> = ratings.iter().map(|(k, v)| (*k, v.0)).collect();
        let mut games: BTreeMap<&str, Vec<(Rating, f64)>> = BTreeMap::new();
        for m in period {
            games
                .entry(&m.model_a)
                .or_default()
                .push((before[m.model_b.as_str()], m.outcome));
            games
                .entry(&m.model_b)
                .or_default()
                .push((before[m.model_a.as_str()], 1.0 - m.outcome));
        }
        for (name, (rating, played)) in ratings.iter_mut() {
            let list = games.get(name).map(Vec::as_slice).unwrap_or(&[]);
            *rating = update_rating(before[name], list, tau)?;
            *played += list.len();
        }
    }
    let mut ranked: Vec<RankedModel> = ratings
        .into_iter()
        .map(|(model, (rating, games))| RankedModel {
            model: model.to_string(),
            rating,
            games,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.rating
            .rating
            .partial_cmp(&a.rating.rating)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.model.cmp(&b.model))
    });
    Ok(ranked)
}

/// Reads a JSON-lines match log; blank lines are skipped.
pub fn read_match_log(path: &Path) -> Result<Vec<MatchRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// A plain-text table: rank, model, rating ± deviation, volatility, games.
pub fn render_table(ranking: &[RankedModel]) -> String {
    let width = ranking.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:>4}  {:<width$}  {:>17}  {:>10}  {:>5}\n",
        "rank", "model", "rating ± RD", "volatility", "games"
    );
    for (i, r) in ranking.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>4}  {:<width$}  {:>8.2} ± {:>6.2}  {:>10.5}  {:>5}",
            i + 1,
            r.model,
            r.rating.rating,
            r.rating.deviation,
            r.rating.volatility,
            r.games
        );
    }
    out
}
