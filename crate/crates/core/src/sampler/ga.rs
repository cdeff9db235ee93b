use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_descriptors, stratify, ArchiveEntry, ClassRaster, DescribedEntry, DistanceMatrix};
use crate::error::{Error, Result};

/// Scores a candidate subset of a stratum. Higher is better.
pub trait Fitness: Sync {
    fn name(&self) -> &str;
    fn score(&self, distances: &DistanceMatrix, selected: &[usize]) -> f64;
}

/// `H(p) + ln(d̄)` over pairwise great-circle distances, `p_ij = d_ij / Σd`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EntropyDistanceFitness;

impl Fitness for EntropyDistanceFitness {
    fn name(&self) -> &str {
        "entropy(pairwise haversine) + ln(mean pairwise haversine km)"
    }

    fn score(&self, dm: &DistanceMatrix, selected: &[usize]) -> f64 {
        let k = selected.len();
        if k < 2 {
            return f64::NEG_INFINITY;
        }
        let mut total = 0.0;
        let mut s_dlnd = 0.0;
        for (a, &i) in selected.iter().enumerate() {
            for &j in &selected[a + 1..] {
                let d = dm.get(i, j);
                if d > 0.0 {
                    total += d;
                    s_dlnd += d * d.ln();
                }
            }
        }
        if !(total > 0.0) {
            return f64::NEG_INFINITY;
        }
        // −Σ (d/D) ln(d/D) = ln D − (Σ d ln d)/D
        let entropy = total.ln() - s_dlnd / total;
        let pairs = (k * (k - 1) / 2) as f64;
        entropy + (total / pairs).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    /// Target entries per stratum `N_s`.
    pub target: usize,
    /// Generations `T`.
    pub iters: usize,
    /// Population size `N_p`.
    pub pop: usize,
    /// Per-gene swap probability in uniform crossover.
    pub rc: f64,
    pub seed: u64,
    /// Stop after this many generations without improvement.
    pub stagnation: Option<usize>,
    /// Also score an equal-size random subset per stratum.
    pub baseline: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig { target: 100, iters: 2500, pop: 10, rc: 0.5, seed: 0, stagnation: None, baseline: false }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target == 0 {
            return Err(Error::Config("GA target must be at least 1".into()));
        }
        if self.pop < 2 {
            return Err(Error::Config(format!("GA population must be at least 2, got {}", self.pop)));
        }
        if !(self.rc > 0.0 && self.rc <= 1.0) {
            return Err(Error::Config(format!("crossover rate must lie in (0, 1], got {}", self.rc)));
        }
        Ok(())
    }
}

/// `r_m = N_s / (n_g·25)`, capped at 1.
pub fn mutation_rate(target: usize, n_g: usize) -> f64 {
    (target as f64 / (n_g as f64 * 25.0)).min(1.0)
}

/// Allowed chromosome sizes `[ceil(0.9·N_s), floor(1.1·N_s)]`, capped at `n_g`.
pub fn repair_band(target: usize, n_g: usize) -> (usize, usize) {
    let lo = (9 * target).div_ceil(10);
    let hi = 11 * target / 10;
    (lo.min(n_g), hi.min(n_g))
}

/// Moves a chromosome's size to the nearest band edge by clearing or setting
/// uniformly chosen bits. Returns the new size.
pub fn repair<R: Rng + ?Sized>(bits: &mut [bool], target: usize, rng: &mut R) -> usize {
    let (lo, hi) = repair_band(target, bits.len());
    let count = bits.iter().filter(|&&b| b).count();
    if count > hi {
        let on: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
        for k in index::sample(rng, on.len(), count - hi) {
            bits[on[k]] = false;
        }
        hi
    } else if count < lo {
        let off: Vec<usize> = (0..bits.len()).filter(|&i| !bits[i]).collect();
        for k in index::sample(rng, off.len(), lo - count) {
            bits[off[k]] = true;
        }
        lo
    } else {
        count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOutcome {
    /// Sorted indices into the stratum.
    pub selected: Vec<usize>,
    pub fitness: f64,
    pub generations: usize,
    pub mutation_rate: f64,
    /// Best-ever fitness after initialization and after each generation.
    pub best_history: Vec<f64>,
}

fn ones(bits: &[bool]) -> Vec<usize> {
    (0..bits.len()).filter(|&i| bits[i]).collect()
}

/// Selects a dispersed subset of about `cfg.target` points. Strata no larger
/// than the target are returned whole.
pub fn evolve_stratum(points: &[(f64, f64)], cfg: &GaConfig, fitness: &dyn Fitness, seed: u64) -> EvolveOutcome {
    let n_g = points.len();
    let dm = DistanceMatrix::new(points);
    let r_m = mutation_rate(cfg.target, n_g.max(1));
    if n_g <= cfg.target {
        let all: Vec<usize> = (0..n_g).collect();
        let f = fitness.score(&dm, &all);
        return EvolveOutcome { selected: all, fitness: f, generations: 0, mutation_rate: r_m, best_history: vec![f] };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score = |pop: &[Vec<bool>]| -> Vec<f64> { pop.par_iter().map(|b| fitness.score(&dm, &ones(b))).collect() };

    let mut pop: Vec<Vec<bool>> = (0..cfg.pop)
        .map(|_| {
            let mut b = vec![false; n_g];
            for i in index::sample(&mut rng, n_g, cfg.target) {
                b[i] = true;
            }
            b
        })
        .collect();
    let mut scores = score(&pop);
    let argmax = |s: &[f64]| (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best });
    let mut best_i = argmax(&scores);
    let mut best = (pop[best_i].clone(), scores[best_i]);
    let mut history = vec![best.1];
    let geometric = Geometric::new(r_m).expect("mutation rate in (0, 1]");
    let mut stagnant = 0;
    let mut generations = 0;

    for _ in 0..cfg.iters {
        generations += 1;
        let mut next = Vec::with_capacity(cfg.pop);
        next.push(pop[best_i].clone());
        let elite_score = scores[best_i];
        while next.len() < cfg.pop {
            let tournament = |rng: &mut ChaCha8Rng| {
                let (a, b) = (rng.random_range(0..cfg.pop), rng.random_range(0..cfg.pop));
                if scores[b] > scores[a] {
                    b
                } else {
                    a
                }
            };
            let (pa, pb) = (tournament(&mut rng), tournament(&mut rng));
            let mut child = pop[pa].clone();
            for (i, g) in child.iter_mut().enumerate() {
                if *g != pop[pb][i] && rng.random_bool(cfg.rc) {
                    *g = pop[pb][i];
                }
            }
            // Bit-flip mutation: jump between flipped positions with geometric gaps.
            let mut i = geometric.sample(&mut rng) as usize;
            while i < n_g {
                child[i] = !child[i];
                i = i.saturating_add(1).saturating_add(geometric.sample(&mut rng) as usize);
            }
            repair(&mut child, cfg.target, &mut rng);
            next.push(child);
        }
        let mut next_scores = vec![elite_score];
        next_scores.extend(score(&next[1..]));
        pop = next;
        scores = next_scores;
        best_i = argmax(&scores);
        if scores[best_i] > best.1 {
            best = (pop[best_i].clone(), scores[best_i]);
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        history.push(best.1);
        if cfg.stagnation.is_some_and(|limit| stagnant >= limit) {
            break;
        }
    }
    EvolveOutcome { selected: ones(&best.0), fitness: best.1, generations, mutation_rate: r_m, best_history: history }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEntry {
    pub id: String,
    pub u: u16,
    pub v: u16,
    pub stratum_fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub u: u16,
    pub v: u16,
    pub n_g: usize,
    pub selected: usize,
    /// `None` when fewer than two distinct points were selected.
    pub fitness: Option<f64>,
    pub mean_distance_km: Option<f64>,
    pub mutation_rate: f64,
    pub generations: usize,
    pub baseline_fitness: Option<f64>,
    pub baseline_mean_distance_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub operators: String,
    pub fitness: String,
    pub config: GaConfig,
    pub archive_size: usize,
    pub described: usize,
    pub selected: usize,
    pub strata: Vec<StratumReport>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// splitmix64 finalizer, used to derive independent per-stratum seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stratum_seed(seed: u64, u: u16, v: u16) -> u64 {
    mix(seed ^ mix(((u as u64) << 16) | v as u64))
}

/// Descriptor generation, stratification, and per-stratum evolution. The
/// selection lists strata in `(u, v)` order and entries in archive order.
pub fn sample_archive(
    archive: &[ArchiveEntry],
    climate: &ClassRaster,
    thematic: &ClassRaster,
    cfg: &GaConfig,
    fitness: &dyn Fitness,
) -> Result<(Vec<SelectedEntry>, SamplingReport)> {
    cfg.validate()?;
    let described = generate_descriptors(archive, climate, thematic);
    let strata: Vec<((u16, u16), Vec<DescribedEntry>)> = stratify(&described).into_iter().collect();
    let results: Vec<(Vec<SelectedEntry>, StratumReport)> = strata
        .par_iter()
        .map(|((u, v), members)| {
            let points: Vec<(f64, f64)> = members.iter().map(|d| d.entry.center()).collect();
            let seed = stratum_seed(cfg.seed, *u, *v);
            let out = evolve_stratum(&points, cfg, fitness, seed);
            let dm = DistanceMatrix::new(&points);
            let (baseline_fitness, baseline_mean_distance_km) = if cfg.baseline {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
                let mut pick = index::sample(&mut rng, points.len(), out.selected.len()).into_vec();
                pick.sort_unstable();
                (finite(fitness.score(&dm, &pick)), dm.mean_distance(&pick))
            } else {
                (None, None)
            };
            let selected = out
                .selected
                .iter()
                .map(|&i| SelectedEntry { id: members[i].entry.id.clone(), u: *u, v: *v, stratum_fitness: out.fitness })
                .collect();
            let report = StratumReport {
                u: *u,
                v: *v,
                n_g: points.len(),
                selected: out.selected.len(),
                fitness: finite(out.fitness),
                mean_distance_km: dm.mean_distance(&out.selected),
                mutation_rate: out.mutation_rate,
                generations: out.generations,
                baseline_fitness,
                baseline_mean_distance_km,
            };
            (selected, report)
        })
        .collect();
    let mut selection = Vec::new();
    let mut reports = Vec::with_capacity(results.len());
    for (s, r) in results {
        selection.extend(s);
        reports.push(r);
    }
    let report = SamplingReport {
        operators: "tournament(2) selection; uniform crossover (per-gene rate rc); bit-flip mutation \
                    r_m = N_s/(n_g*25); repair to nearest edge of [ceil(0.9 N_s), floor(1.1 N_s)]; elitism 1"
            .into(),
        fitness: fitness.name().into(),
        config: cfg.clone(),
        archive_size: archive.len(),
        described: described.len(),
        selected: selection.len(),
        strata: reports,
    };
    Ok((selection, report))
}
