//! The surrogate-scored genetic search: seeded initialization, two-point
//! crossover, polynomial mutation on integer genes, elitist top-half
//! selection, and final best-architecture retraining.

use crate::search_space::{
    sample_uniform, ArchitectureEncoding, OperationTable, ENCODING_DIM,
};
use crate::surrogate::SurrogateModel;
use crate::trainer::{fitness, Dataset, FitnessConfig, FitnessRecord, TrainerError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    BadConfig(String),
    #[error("invalid crossover cuts ({0}, {1})")]
    BadCuts(usize, usize),
}

/// Anything that can score an encoding; the search itself never calls
/// the real evaluator.
pub trait FitnessScorer {
    fn score(&self, enc: &ArchitectureEncoding) -> f64;
    fn minimize(&self) -> bool;
}

/// The standard scorer: a fitted surrogate plus the metric direction.
pub struct SurrogateScorer<'a> {
    pub model: &'a SurrogateModel,
    pub minimize: bool,
}

impl FitnessScorer for SurrogateScorer<'_> {
    fn score(&self, enc: &ArchitectureEncoding) -> f64 {
        self.model.predict(enc)
    }

    fn minimize(&self) -> bool {
        self.minimize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub mutation_eta: f64,
    pub seed: u64,
    pub elitism: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population_size: 20,
            generations: 30,
            crossover_prob: 0.7,
            mutation_prob: 1.0 / ENCODING_DIM as f64,
            mutation_eta: 20.0,
            seed: 0,
            elitism: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.population_size < 2 || self.population_size % 2 != 0 {
            return Err(SearchError::BadConfig(format!(
                "population_size {} must be even and >= 2",
                self.population_size
            )));
        }
        for (name, p) in [("crossover_prob", self.crossover_prob), ("mutation_prob", self.mutation_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(SearchError::BadConfig(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.mutation_eta < 0.0 {
            return Err(SearchError::BadConfig("negative mutation_eta".into()));
        }
        Ok(())
    }
}

/// One scored individual; birth_gen and audit_index make ordering total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub encoding: ArchitectureEncoding,
    pub predicted: f64,
    pub birth_gen: usize,
    pub audit_index: usize,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    pub generation: usize,
    pub population: Vec<Individual>,
    pub best_ever: Individual,
    pub rng: ChaCha8Rng,
    /// Every encoding ever scored, in scoring order.
    pub audit_log: Vec<ArchitectureEncoding>,
    pub minimize: bool,
}

/// Per-generation history line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_pred: f64,
    pub mean_pred: f64,
    pub best_encoding: ArchitectureEncoding,
}

fn better(a: &Individual, b: &Individual, minimize: bool) -> bool {
    let key = |ind: &Individual| if minimize { ind.predicted } else { -ind.predicted };
    (key(a), a.birth_gen, a.audit_index) < (key(b), b.birth_gen, b.audit_index)
}

impl SearchState {
    fn score(
        &mut self,
        enc: ArchitectureEncoding,
        scorer: &dyn FitnessScorer,
        birth_gen: usize,
    ) -> Individual {
        let audit_index = self.audit_log.len();
        self.audit_log.push(enc);
        let ind =
            Individual { encoding: enc, predicted: scorer.score(&enc), birth_gen, audit_index };
        if better(&ind, &self.best_ever, self.minimize) {
            self.best_ever = ind;
        }
        ind
    }

    pub fn best_of_population(&self) -> Individual {
        *self
            .population
            .iter()
            .reduce(|a, b| if better(b, a, self.minimize) { b } else { a })
            .expect("non-empty population")
    }

    fn stats(&self) -> GenerationStats {
        let best = self.best_of_population();
        let mean = self.population.iter().map(|i| i.predicted).sum::<f64>()
            / self.population.len() as f64;
        GenerationStats {
            generation: self.generation,
            best_pred: best.predicted,
            mean_pred: mean,
            best_encoding: best.encoding,
        }
    }
}

/// N_p uniform samples, each scored by the surrogate.
pub fn init_population(
    cfg: &SearchConfig,
    table: &OperationTable,
    scorer: &dyn FitnessScorer,
) -> Result<SearchState, SearchError> {
    cfg.validate()?;
    let mut state = SearchState {
        generation: 0,
        population: Vec::with_capacity(cfg.population_size),
        best_ever: Individual {
            encoding: ArchitectureEncoding { genes: [0; 6] },
            predicted: if scorer.minimize() { f64::INFINITY } else { f64::NEG_INFINITY },
            birth_gen: usize::MAX,
            audit_index: usize::MAX,
        },
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        audit_log: Vec::new(),
        minimize: scorer.minimize(),
    };
    for _ in 0..cfg.population_size {
        let enc = sample_uniform(table, &mut state.rng);
        let ind = state.score(enc, scorer, 0);
        state.population.push(ind);
    }
    Ok(state)
}

/// Swap genes in positions [i, j) between the parents.
pub fn two_point_crossover(
    p1: &ArchitectureEncoding,
    p2: &ArchitectureEncoding,
    cuts: (usize, usize),
) -> Result<(ArchitectureEncoding, ArchitectureEncoding), SearchError> {
    let (i, j) = cuts;
    if i >= j || j > ENCODING_DIM {
        return Err(SearchError::BadCuts(i, j));
    }
    let mut c1 = *p1;
    let mut c2 = *p2;
    for k in i..j {
        c1.genes[k] = p2.genes[k];
        c2.genes[k] = p1.genes[k];
    }
    Ok((c1, c2))
}

/// Real-coded polynomial mutation per gene, rounded and clamped back to
/// the integer range.
pub fn polynomial_mutation(
    enc: &ArchitectureEncoding,
    bounds: &[usize; ENCODING_DIM],
    p_m: f64,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> ArchitectureEncoding {
    let mut out = *enc;
    for k in 0..ENCODING_DIM {
        if rng.gen::<f64>() >= p_m {
            continue;
        }
        let hi = (bounds[k] - 1) as f64;
        if hi == 0.0 {
            continue;
        }
        let y = out.genes[k] as f64;
        let u: f64 = rng.gen();
        let mut_pow = 1.0 / (eta + 1.0);
        let deltaq = if u <= 0.5 {
            let xy = 1.0 - y / hi;
            let val = 2.0 * u + (1.0 - 2.0 * u) * xy.powf(eta + 1.0);
            val.powf(mut_pow) - 1.0
        } else {
            let xy = 1.0 - (hi - y) / hi;
            let val = 2.0 * (1.0 - u) + (2.0 * u - 1.0) * xy.powf(eta + 1.0);
            1.0 - val.powf(mut_pow)
        };
        let mutated = (y + deltaq * hi).round().clamp(0.0, hi);
        out.genes[k] = mutated as usize;
    }
    out
}

/// mu+lambda truncation: the N_p best of the merged pool, ties broken by
/// (earlier generation, lower audit index).
pub fn environmental_selection(
    parents: &[Individual],
    offspring: &[Individual],
    n_p: usize,
    minimize: bool,
) -> Vec<Individual> {
    let mut pool: Vec<Individual> = parents.iter().chain(offspring).copied().collect();
    pool.sort_by(|a, b| {
        let ka = if minimize { a.predicted } else { -a.predicted };
        let kb = if minimize { b.predicted } else { -b.predicted };
        (ka, a.birth_gen, a.audit_index)
            .partial_cmp(&(kb, b.birth_gen, b.audit_index))
            .unwrap()
    });
    // duplicate encodings only fill seats distinct ones cannot; this keeps
    // clone offspring from crowding out the parent population
    let mut chosen: Vec<Individual> = Vec::with_capacity(n_p);
    let mut skipped: Vec<Individual> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for ind in pool {
        if chosen.len() == n_p {
            break;
        }
        if seen.insert(ind.encoding) {
            chosen.push(ind);
        } else {
            skipped.push(ind);
        }
    }
    for ind in skipped {
        if chosen.len() == n_p {
            break;
        }
        chosen.push(ind);
    }
    chosen
}

/// T generations of reproduce, surrogate-score, select.
pub fn run_search(
    cfg: &SearchConfig,
    table: &OperationTable,
    scorer: &dyn FitnessScorer,
) -> Result<(ArchitectureEncoding, SearchState, Vec<GenerationStats>), SearchError> {
    let mut state = init_population(cfg, table, scorer)?;
    let bounds = table.bounds();
    let mut history = vec![state.stats()];
    for gen in 1..=cfg.generations {
        state.generation = gen;
        // shuffle parents, pair adjacently
        let mut order: Vec<usize> = (0..state.population.len()).collect();
        for i in (1..order.len()).rev() {
            let j = state.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut offspring = Vec::with_capacity(cfg.population_size);
        for pair in order.chunks(2) {
            let p1 = state.population[pair[0]].encoding;
            let p2 = state.population[pair[1]].encoding;
            let (mut c1, mut c2) = if state.rng.gen::<f64>() < cfg.crossover_prob {
                let i = state.rng.gen_range(0..ENCODING_DIM);
                let j = state.rng.gen_range(i + 1..=ENCODING_DIM);
                two_point_crossover(&p1, &p2, (i, j))?
            } else {
                (p1, p2)
            };
            c1 = polynomial_mutation(&c1, &bounds, cfg.mutation_prob, cfg.mutation_eta, &mut state.rng);
            c2 = polynomial_mutation(&c2, &bounds, cfg.mutation_prob, cfg.mutation_eta, &mut state.rng);
            offspring.push(c1);
            offspring.push(c2);
        }
        let scored: Vec<Individual> =
            offspring.into_iter().map(|enc| state.score(enc, scorer, gen)).collect();
        state.population = if cfg.elitism {
            environmental_selection(
                &state.population,
                &scored,
                cfg.population_size,
                state.minimize,
            )
        } else {
            scored
        };
        history.push(state.stats());
    }
    let best = state.best_of_population();
    Ok((best.encoding, state, history))
}

/// One full real-evaluator run of the winning encoding; the final
/// reported result always comes from here, never from the surrogate.
pub fn retrain_best(
    best: &ArchitectureEncoding,
    table: &OperationTable,
    dataset: &Dataset,
    cfg: &FitnessConfig,
) -> Result<FitnessRecord, TrainerError> {
    fitness(best, table, dataset, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::enumerate_all;

    struct SumScorer;
    impl FitnessScorer for SumScorer {
        fn score(&self, enc: &ArchitectureEncoding) -> f64 {
            enc.genes.iter().sum::<usize>() as f64 / 30.0
        }
        fn minimize(&self) -> bool {
            false
        }
    }

    #[test]
    fn crossover_spec_examples() {
        let a = ArchitectureEncoding { genes: [0, 0, 0, 0, 0, 0] };
        let b = ArchitectureEncoding { genes: [3, 2, 5, 7, 7, 3] };
        let (c1, c2) = two_point_crossover(&a, &b, (1, 4)).unwrap();
        assert_eq!(c1.genes, [0, 2, 5, 7, 0, 0]);
        assert_eq!(c2.genes, [3, 0, 0, 0, 7, 3]);
        let (c1, c2) = two_point_crossover(&a, &b, (0, 6)).unwrap();
        assert_eq!(c1, b);
        assert_eq!(c2, a);
        let (c1, c2) = two_point_crossover(&b, &b, (2, 5)).unwrap();
        assert_eq!(c1, b);
        assert_eq!(c2, b);
        assert!(two_point_crossover(&a, &b, (4, 4)).is_err());
        assert!(two_point_crossover(&a, &b, (3, 7)).is_err());
    }

    #[test]
    fn zero_mutation_prob_is_identity() {
        let bounds = OperationTable::default().bounds();
        let enc = ArchitectureEncoding { genes: [1, 2, 3, 4, 5, 0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(polynomial_mutation(&enc, &bounds, 0.0, 20.0, &mut rng), enc);
        }
    }

    #[test]
    fn mutation_covers_full_range_and_stays_in_bounds() {
        let bounds = OperationTable::default().bounds();
        let enc = ArchitectureEncoding { genes: [0, 0, 0, 4, 4, 0] };
        let table = OperationTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = std::collections::HashSet::new();
        // chained trials: eta = 20 is a local operator, so coverage of the
        // full range comes from the walk, not from single jumps
        let mut current = enc;
        for _ in 0..10_000 {
            current = polynomial_mutation(&current, &bounds, 1.0, 20.0, &mut rng);
            assert!(current.validate(&table).is_ok());
            seen.insert(current.genes[3]);
        }
        assert_eq!(seen.len(), 8, "gene 3 values seen: {seen:?}");
    }

    fn ind(genes: [usize; 6], pred: f64, gen: usize, audit: usize) -> Individual {
        Individual {
            encoding: ArchitectureEncoding { genes },
            predicted: pred,
            birth_gen: gen,
            audit_index: audit,
        }
    }

    #[test]
    fn selection_keeps_parents_when_offspring_worse() {
        let parents: Vec<Individual> =
            (0..4).map(|i| ind([i, 0, 0, 0, 0, 0], 0.9 - i as f64 * 0.01, 0, i)).collect();
        let offspring: Vec<Individual> =
            (0..4).map(|i| ind([0, 0, 0, 0, 0, i], 0.1, 1, 4 + i)).collect();
        let next = environmental_selection(&parents, &offspring, 4, false);
        assert_eq!(next, parents);
    }

    #[test]
    fn selection_takes_sorted_top() {
        let parents = vec![ind([0; 6], 0.2, 0, 0), ind([1, 0, 0, 0, 0, 0], 0.8, 0, 1)];
        let offspring = vec![ind([2, 0, 0, 0, 0, 0], 0.5, 1, 2), ind([3, 0, 0, 0, 0, 0], 0.9, 1, 3)];
        let next = environmental_selection(&parents, &offspring, 2, false);
        assert_eq!(next[0].predicted, 0.9);
        assert_eq!(next[1].predicted, 0.8);
        // minimize flips the order
        let next = environmental_selection(&parents, &offspring, 2, true);
        assert_eq!(next[0].predicted, 0.2);
        assert_eq!(next[1].predicted, 0.5);
    }

    #[test]
    fn selection_ties_prefer_earlier_generation_then_audit_index() {
        let parents = vec![ind([0; 6], 0.5, 0, 1), ind([1, 0, 0, 0, 0, 0], 0.5, 0, 0)];
        let offspring = vec![ind([2, 0, 0, 0, 0, 0], 0.5, 1, 2), ind([3, 0, 0, 0, 0, 0], 0.5, 1, 3)];
        let next = environmental_selection(&parents, &offspring, 2, false);
        assert_eq!(next[0].audit_index, 0);
        assert_eq!(next[1].audit_index, 1);
    }

    #[test]
    fn init_population_is_seeded_and_full() {
        let cfg = SearchConfig::default();
        let table = OperationTable::default();
        let a = init_population(&cfg, &table, &SumScorer).unwrap();
        let b = init_population(&cfg, &table, &SumScorer).unwrap();
        assert_eq!(a.population, b.population);
        assert_eq!(a.population.len(), 20);
        assert!(a.population.iter().all(|i| i.encoding.validate(&table).is_ok()));
    }

    #[test]
    fn zero_generations_returns_initial_best() {
        let cfg = SearchConfig { generations: 0, ..Default::default() };
        let table = OperationTable::default();
        let (best, state, history) = run_search(&cfg, &table, &SumScorer).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(best, state.best_of_population().encoding);
    }

    #[test]
    fn frozen_operators_leave_population_invariant() {
        let cfg = SearchConfig {
            crossover_prob: 0.0,
            mutation_prob: 0.0,
            generations: 5,
            ..Default::default()
        };
        let table = OperationTable::default();
        let init = init_population(&cfg, &table, &SumScorer).unwrap();
        let (_, state, _) = run_search(&cfg, &table, &SumScorer).unwrap();
        let mut want: Vec<ArchitectureEncoding> =
            init.population.iter().map(|i| i.encoding).collect();
        let mut got: Vec<ArchitectureEncoding> =
            state.population.iter().map(|i| i.encoding).collect();
        want.sort_by_key(|e| e.genes);
        got.sort_by_key(|e| e.genes);
        assert_eq!(want, got);
    }

    #[test]
    fn history_best_is_monotone_under_elitism() {
        let table = OperationTable::default();
        for seed in 0..5 {
            let cfg = SearchConfig { seed, ..Default::default() };
            let (_, _, history) = run_search(&cfg, &table, &SumScorer).unwrap();
            for w in history.windows(2) {
                assert!(w[1].best_pred >= w[0].best_pred);
            }
        }
    }

    #[test]
    fn search_finds_the_unique_maximum_of_gene_sum() {
        let table = OperationTable::default();
        // exhaustive check that [3,2,5,7,7,3] is the unique optimum
        let best_enum = enumerate_all(&table)
            .max_by_key(|e| e.genes.iter().sum::<usize>())
            .unwrap();
        assert_eq!(best_enum.genes, [3, 2, 5, 7, 7, 3]);
        let cfg = SearchConfig { seed: 4, ..Default::default() };
        let (best, _, _) = run_search(&cfg, &table, &SumScorer).unwrap();
        assert_eq!(best.genes, [3, 2, 5, 7, 7, 3]);
    }

    #[test]
    fn search_is_bit_reproducible() {
        let table = OperationTable::default();
        let cfg = SearchConfig { seed: 77, ..Default::default() };
        let a = run_search(&cfg, &table, &SumScorer).unwrap();
        let b = run_search(&cfg, &table, &SumScorer).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
        assert_eq!(a.1.audit_log, b.1.audit_log);
    }

    #[test]
    fn every_audited_encoding_is_in_bounds() {
        let table = OperationTable::default();
        let cfg = SearchConfig { seed: 3, ..Default::default() };
        let (_, state, _) = run_search(&cfg, &table, &SumScorer).unwrap();
        assert_eq!(state.audit_log.len(), 20 * 31);
        assert!(state.audit_log.iter().all(|e| e.validate(&table).is_ok()));
    }

    #[test]
    fn odd_population_is_rejected() {
        let cfg = SearchConfig { population_size: 7, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(SearchError::BadConfig(_))));
    }
}
