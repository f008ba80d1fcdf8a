//! Best-of-N generation with early pruning and exact cost accounting.
//!
//! N candidates denoise in parallel up to `stop_step`, where each is scored
//! against the prompt on its latent frame. Only the top `keep` survivors
//! continue to completion; the winner among survivors is picked at the end.
//! Cost is counted in denoising iterations, the unit a diffusion backend
//! actually spends: `n * stop_step + keep * (T_total - stop_step)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_map_indexed;
use crate::preview::LatentProjection;
use crate::scoring::{s_final, s_latent, AlignmentScore, EncoderGateway, ScoreStep};
use crate::store::LatentFrame;
use crate::tensor::RgbImage;

/// One in-flight candidate generation.
pub trait CandidateState: Send {
    /// Advances one denoising iteration and returns the new latent frame.
    /// Exactly `T_total` calls are allowed from init to completion.
    fn step(&mut self) -> Result<LatentFrame>;
    fn steps_completed(&self) -> u32;
    /// Decodes the final image. Only valid once all `T_total` steps ran.
    fn finalize(self: Box<Self>) -> Result<RgbImage>;
}

/// A pluggable denoiser. `init` must be deterministic in (prompt, seed) and
/// `step` deterministic in (prompt, seed, step index).
pub trait DenoiserBackend: Send + Sync {
    fn t_total(&self) -> u32;
    fn init(&self, prompt: &str, seed: u64) -> Result<Box<dyn CandidateState>>;
}

/// Scores candidates during and after generation. The production
/// implementation wraps a gateway plus latent projection; fixtures plant
/// score curves directly.
pub trait CandidateScorer: Send + Sync {
    fn score_frame(&self, frame: &LatentFrame, prompt: &str) -> Result<AlignmentScore>;
    fn score_image(&self, image: &RgbImage, prompt: &str) -> Result<AlignmentScore>;
    fn tag(&self) -> &str;
}

/// `s_latent` / `s_final` of a gateway through a fixed projection.
pub struct GatewayScorer<'a> {
    pub gateway: &'a dyn EncoderGateway,
    pub projection: LatentProjection,
}

impl CandidateScorer for GatewayScorer<'_> {
    fn score_frame(&self, frame: &LatentFrame, prompt: &str) -> Result<AlignmentScore> {
        s_latent(self.gateway, frame, &self.projection, prompt)
    }

    fn score_image(&self, image: &RgbImage, prompt: &str) -> Result<AlignmentScore> {
        s_final(self.gateway, image, prompt)
    }

    fn tag(&self) -> &str {
        self.gateway.checkpoint_tag()
    }
}

/// A Best-of-N plan. `stop_step = T_total` degenerates to classic rerank-
/// at-the-end BoN; `keep = n` disables pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoNPlan {
    pub n: usize,
    pub stop_step: u32,
    pub keep: usize,
    pub seed_list: Vec<u64>,
    /// Frames averaged at the stop barrier: the score is the mean of
    /// `s_latent` over the last `score_window` steps ending at `stop_step`.
    /// 1 = single-step selection.
    pub score_window: u32,
    pub scorer_tag: String,
}

impl BoNPlan {
    pub fn new(n: usize, stop_step: u32, keep: usize, seed_list: Vec<u64>) -> Result<Self> {
        let plan = Self {
            n,
            stop_step,
            keep,
            seed_list,
            score_window: 1,
            scorer_tag: String::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Argument("BoN plan needs n >= 1 candidates".into()));
        }
        if self.keep == 0 || self.keep > self.n {
            return Err(Error::Argument(format!(
                "keep must satisfy 1 <= keep <= n, got keep={} n={}",
                self.keep, self.n
            )));
        }
        if self.seed_list.len() != self.n {
            return Err(Error::Argument(format!(
                "seed_list has {} entries for n={}",
                self.seed_list.len(),
                self.n
            )));
        }
        if self.score_window == 0 {
            return Err(Error::Argument("score_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exact count of denoising iterations spent per candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub per_candidate_steps: Vec<u64>,
    pub total: u64,
}

impl CostLedger {
    pub fn new(per_candidate_steps: Vec<u64>) -> Self {
        let total = per_candidate_steps.iter().sum();
        Self {
            per_candidate_steps,
            total,
        }
    }
}

/// The closed-form cost of a pruned BoN run:
/// `n * stop_step + keep * (T_total - stop_step)`.
pub fn cost_of(n: usize, stop_step: u32, t_total: u32, keep: usize) -> Result<u64> {
    if n == 0 {
        return Err(Error::Argument("cost_of: n must be >= 1".into()));
    }
    if keep == 0 || keep > n {
        return Err(Error::Argument(format!(
            "cost_of: keep must satisfy 1 <= keep <= n, got keep={keep} n={n}"
        )));
    }
    if stop_step > t_total {
        return Err(Error::Argument(format!(
            "cost_of: stop_step {stop_step} exceeds T_total {t_total}"
        )));
    }
    Ok(n as u64 * stop_step as u64 + keep as u64 * (t_total - stop_step) as u64)
}

/// Per-candidate record of what happened in a run.
#[derive(Clone, Debug)]
pub struct CandidateTrace {
    pub seed: u64,
    /// Mean stop-barrier score over the plan's window; None when
    /// `stop_step = 0` leaves nothing to score (treated as -inf for
    /// ranking, ties broken by lowest index).
    pub stop_score: Option<f64>,
    /// Score used for the final selection (survivors only).
    pub final_score: Option<f64>,
    pub pruned_at: Option<u32>,
    pub steps_run: u32,
    pub final_image: Option<RgbImage>,
}

#[derive(Debug)]
pub struct BonRunOutput {
    pub prompt: String,
    pub plan: BoNPlan,
    pub t_total: u32,
    pub selected_index: usize,
    pub selected_seed: u64,
    pub selected_image: RgbImage,
    pub traces: Vec<CandidateTrace>,
    pub ledger: CostLedger,
}

/// A backend failure mid-run: carries the iterations already spent.
#[derive(Debug)]
pub struct BonFailure {
    pub error: Error,
    pub partial_ledger: CostLedger,
}

impl std::fmt::Display for BonFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BoN run failed after spending {} iterations: {}",
            self.partial_ledger.total, self.error
        )
    }
}

impl From<BonFailure> for Error {
    fn from(f: BonFailure) -> Self {
        f.error
    }
}

/// Ranks `Option<f64>` scores descending with None as -inf, ties broken by
/// lowest index. Shared by the live runner and the sweep replayer.
fn rank_optional_scores(scores: &[Option<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        let a = scores[i].unwrap_or(f64::NEG_INFINITY);
        let b = scores[j].unwrap_or(f64::NEG_INFINITY);
        b.total_cmp(&a)
    });
    order
}

fn window_range(stop_step: u32, window: u32) -> (u32, u32) {
    (stop_step.saturating_sub(window - 1).max(1), stop_step)
}

pub fn run_bon(
    plan: &BoNPlan,
    prompt: &str,
    backend: &dyn DenoiserBackend,
    scorer: &dyn CandidateScorer,
) -> std::result::Result<BonRunOutput, Box<BonFailure>> {
    run_bon_with_workers(plan, prompt, backend, scorer, 1)
}

/// Runs Best-of-N with candidates advanced by up to `workers` threads.
/// Results are keyed by candidate index, so they do not depend on which
/// worker finishes first.
pub fn run_bon_with_workers(
    plan: &BoNPlan,
    prompt: &str,
    backend: &dyn DenoiserBackend,
    scorer: &dyn CandidateScorer,
    workers: usize,
) -> std::result::Result<BonRunOutput, Box<BonFailure>> {
    let fail = |error: Error, spent: &[u64]| {
        Box::new(BonFailure {
            error,
            partial_ledger: CostLedger::new(spent.to_vec()),
        })
    };

    let t_total = backend.t_total();
    plan.validate().map_err(|e| fail(e, &[]))?;
    if plan.stop_step > t_total {
        return Err(fail(
            Error::Argument(format!(
                "stop_step {} exceeds backend T_total {t_total}",
                plan.stop_step
            )),
            &[],
        ));
    }

    let (win_lo, win_hi) = window_range(plan.stop_step, plan.score_window);

    // phase 1: advance every candidate to stop_step, keeping window frames
    struct Advanced {
        state: Box<dyn CandidateState>,
        window_frames: Vec<LatentFrame>,
        steps: u64,
    }
    let spent = Mutex::new(vec![0u64; plan.n]);
    let advanced: Vec<Advanced> = par_map_indexed(plan.n, workers, |i| {
        let mut state = backend.init(prompt, plan.seed_list[i])?;
        let mut window_frames = Vec::new();
        for _ in 0..plan.stop_step {
            let frame = state.step()?;
            spent.lock().unwrap()[i] += 1;
            if plan.stop_step > 0 && (win_lo..=win_hi).contains(&frame.step) {
                window_frames.push(frame);
            }
        }
        Ok(Advanced {
            steps: plan.stop_step as u64,
            state,
            window_frames,
        })
    })
    .map_err(|e| fail(e, &spent.lock().unwrap()))?;

    // phase 2: stop-barrier scores (window mean of s_latent)
    let mut stop_scores: Vec<Option<f64>> = Vec::with_capacity(plan.n);
    for adv in &advanced {
        if plan.stop_step == 0 || adv.window_frames.is_empty() {
            stop_scores.push(None);
            continue;
        }
        let mut acc = 0.0;
        for frame in &adv.window_frames {
            acc += scorer
                .score_frame(frame, prompt)
                .map_err(|e| fail(e, &spent.lock().unwrap()))?
                .value;
        }
        stop_scores.push(Some(acc / adv.window_frames.len() as f64));
    }

    // phase 3: prune to the top-keep
    let order = rank_optional_scores(&stop_scores);
    let survivors: Vec<usize> = order[..plan.keep].to_vec();
    let mut is_survivor = vec![false; plan.n];
    for &i in &survivors {
        is_survivor[i] = true;
    }

    // phase 4: survivors run to completion
    struct Finished {
        index: usize,
        last_frame: Option<LatentFrame>,
        image: RgbImage,
        steps: u64,
    }
    let mut states: Vec<Option<Advanced>> = advanced.into_iter().map(Some).collect();
    let survivor_states: Vec<(usize, Advanced)> = survivors
        .iter()
        .map(|&i| (i, states[i].take().expect("survivor state present")))
        .collect();
    let survivor_states = Mutex::new(
        survivor_states
            .into_iter()
            .map(|(i, a)| Some((i, a)))
            .collect::<Vec<_>>(),
    );
    let finished: Vec<Finished> = par_map_indexed(survivors.len(), workers, |k| {
        let (index, mut adv) = survivor_states.lock().unwrap()[k]
            .take()
            .expect("survivor taken once");
        let mut last_frame = adv.window_frames.into_iter().find(|f| f.step == t_total);
        while adv.state.steps_completed() < t_total {
            let frame = adv.state.step()?;
            spent.lock().unwrap()[index] += 1;
            adv.steps += 1;
            if frame.step == t_total {
                last_frame = Some(frame);
            }
        }
        let image = adv.state.finalize()?;
        Ok(Finished {
            index,
            last_frame,
            image,
            steps: adv.steps,
        })
    })
    .map_err(|e| fail(e, &spent.lock().unwrap()))?;

    // phase 5: final selection among survivors.
    // When stop_step = T_total the survivors are already decoded and the
    // selection uses s_final on the images; otherwise s_latent at T_total.
    let mut final_scores: Vec<(usize, f64)> = Vec::with_capacity(finished.len());
    for fin in &finished {
        let score = if plan.stop_step == t_total {
            scorer
                .score_image(&fin.image, prompt)
                .map_err(|e| fail(e, &spent.lock().unwrap()))?
                .value
        } else {
            let frame = fin.last_frame.as_ref().ok_or_else(|| {
                fail(
                    Error::Data("survivor finished without a final frame".into()),
                    &spent.lock().unwrap(),
                )
            })?;
            scorer
                .score_frame(frame, prompt)
                .map_err(|e| fail(e, &spent.lock().unwrap()))?
                .value
        };
        final_scores.push((fin.index, score));
    }
    // survivors were pushed in rank order; stable max with index tie-break
    let selected_index = final_scores
        .iter()
        .min_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then(ia.cmp(ib)))
        .map(|(i, _)| *i)
        .expect("at least one survivor");

    // assemble traces and ledger
    let mut traces: Vec<CandidateTrace> = (0..plan.n)
        .map(|i| CandidateTrace {
            seed: plan.seed_list[i],
            stop_score: stop_scores[i],
            final_score: None,
            pruned_at: if is_survivor[i] {
                None
            } else {
                Some(plan.stop_step)
            },
            steps_run: plan.stop_step,
            final_image: None,
        })
        .collect();
    let mut selected_image = None;
    for fin in finished {
        traces[fin.index].steps_run = fin.steps as u32;
        traces[fin.index].final_score = final_scores
            .iter()
            .find(|(i, _)| *i == fin.index)
            .map(|(_, s)| *s);
        if fin.index == selected_index {
            selected_image = Some(fin.image.clone());
        }
        traces[fin.index].final_image = Some(fin.image);
    }

    let ledger = CostLedger::new(traces.iter().map(|t| t.steps_run as u64).collect());
    Ok(BonRunOutput {
        prompt: prompt.to_string(),
        plan: plan.clone(),
        t_total,
        selected_index,
        selected_seed: plan.seed_list[selected_index],
        selected_image: selected_image.expect("selected survivor decoded"),
        traces,
        ledger,
    })
}

/// One row of a cost/selection frontier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub stop_step: u32,
    pub n: usize,
    pub keep: usize,
    pub cost: u64,
    pub selections: Vec<SweepSelection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSelection {
    pub prompt_index: usize,
    pub selected_index: usize,
    pub selected_seed: u64,
}

/// Evaluates many plans over shared candidate trajectories. Candidates with
/// identical (prompt, seed) are denoised once and replayed across plans, so
/// the reported `cost` is the plan's model cost, not compute spent here.
/// Output is sorted by (cost, stop_step, n).
pub fn sweep(
    plans: &[BoNPlan],
    prompts: &[String],
    backend: &dyn DenoiserBackend,
    scorer: &dyn CandidateScorer,
) -> Result<Vec<SweepRow>> {
    let t_total = backend.t_total();
    for plan in plans {
        plan.validate()?;
        if plan.stop_step > t_total {
            return Err(Error::Argument(format!(
                "plan stop_step {} exceeds backend T_total {t_total}",
                plan.stop_step
            )));
        }
    }

    // union of steps any plan will need
    let mut needed_steps: Vec<u32> = vec![t_total];
    for plan in plans {
        if plan.stop_step > 0 {
            let (lo, hi) = window_range(plan.stop_step, plan.score_window);
            needed_steps.extend(lo..=hi);
        }
    }
    needed_steps.sort_unstable();
    needed_steps.dedup();

    struct Cached {
        frames: BTreeMap<u32, LatentFrame>,
        image: RgbImage,
    }
    let mut cache: HashMap<(usize, u64), Cached> = HashMap::new();
    let ensure =
        |prompt_idx: usize, seed: u64, cache: &mut HashMap<(usize, u64), Cached>| -> Result<()> {
            if cache.contains_key(&(prompt_idx, seed)) {
                return Ok(());
            }
            let mut state = backend.init(&prompts[prompt_idx], seed)?;
            let mut frames = BTreeMap::new();
            for _ in 0..t_total {
                let frame = state.step()?;
                if needed_steps.binary_search(&frame.step).is_ok() {
                    frames.insert(frame.step, frame);
                }
            }
            let image = state.finalize()?;
            cache.insert((prompt_idx, seed), Cached { frames, image });
            Ok(())
        };

    let mut rows = Vec::with_capacity(plans.len());
    for plan in plans {
        let mut selections = Vec::with_capacity(prompts.len());
        for (pi, prompt) in prompts.iter().enumerate() {
            for &seed in &plan.seed_list {
                ensure(pi, seed, &mut cache)?;
            }
            // stop-barrier scores from the cache
            let mut stop_scores: Vec<Option<f64>> = Vec::with_capacity(plan.n);
            let (win_lo, win_hi) = window_range(plan.stop_step, plan.score_window);
            for &seed in &plan.seed_list {
                let cached = &cache[&(pi, seed)];
                if plan.stop_step == 0 {
                    stop_scores.push(None);
                    continue;
                }
                let mut acc = 0.0;
                let mut count = 0usize;
                for step in win_lo..=win_hi {
                    if let Some(frame) = cached.frames.get(&step) {
                        acc += scorer.score_frame(frame, prompt)?.value;
                        count += 1;
                    }
                }
                stop_scores.push(if count > 0 {
                    Some(acc / count as f64)
                } else {
                    None
                });
            }
            let order = rank_optional_scores(&stop_scores);
            let survivors = &order[..plan.keep];
            let mut final_scores: Vec<(usize, f64)> = Vec::with_capacity(survivors.len());
            for &i in survivors {
                let cached = &cache[&(pi, plan.seed_list[i])];
                let score = if plan.stop_step == t_total {
                    scorer.score_image(&cached.image, prompt)?.value
                } else {
                    let frame = cached
                        .frames
                        .get(&t_total)
                        .ok_or_else(|| Error::Data("missing final frame in sweep cache".into()))?;
                    scorer.score_frame(frame, prompt)?.value
                };
                final_scores.push((i, score));
            }
            let selected = final_scores
                .iter()
                .min_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then(ia.cmp(ib)))
                .map(|(i, _)| *i)
                .expect("keep >= 1 survivor");
            selections.push(SweepSelection {
                prompt_index: pi,
                selected_index: selected,
                selected_seed: plan.seed_list[selected],
            });
        }
        rows.push(SweepRow {
            stop_step: plan.stop_step,
            n: plan.n,
            keep: plan.keep,
            cost: cost_of(plan.n, plan.stop_step, t_total, plan.keep)?,
            selections,
        });
    }
    rows.sort_by(|a, b| {
        a.cost
            .cmp(&b.cost)
            .then(a.stop_step.cmp(&b.stop_step))
            .then(a.n.cmp(&b.n))
    });
    Ok(rows)
}

/// One line of a BoN run record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonRecord {
    pub prompt_id: String,
    pub seed: u64,
    pub step: ScoreStep,
    pub score: f64,
    pub pruned_at: Option<u32>,
}

/// Flattens a run into line-delimited records: one per scoring event.
pub fn records_from_run(prompt_id: &str, run: &BonRunOutput) -> Vec<BonRecord> {
    let mut records = Vec::new();
    for trace in &run.traces {
        if let Some(score) = trace.stop_score {
            records.push(BonRecord {
                prompt_id: prompt_id.to_string(),
                seed: trace.seed,
                step: ScoreStep::Latent(run.plan.stop_step),
                score,
                pruned_at: trace.pruned_at,
            });
        }
        if let Some(score) = trace.final_score {
            let step = if run.plan.stop_step == run.t_total {
                ScoreStep::Final
            } else {
                ScoreStep::Latent(run.t_total)
            };
            records.push(BonRecord {
                prompt_id: prompt_id.to_string(),
                seed: trace.seed,
                step,
                score,
                pruned_at: trace.pruned_at,
            });
        }
    }
    records
}

pub fn write_bon_records(path: &Path, records: &[BonRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_of_reference_values() {
        assert_eq!(cost_of(2, 25, 50, 1).unwrap(), 75);
        assert_eq!(cost_of(6, 20, 50, 1).unwrap(), 150);
        assert_eq!(cost_of(6, 30, 50, 1).unwrap(), 200);
        assert_eq!(cost_of(6, 50, 50, 1).unwrap(), 300);
        // no early stop: n * T
        assert_eq!(cost_of(4, 10, 10, 2).unwrap(), 40);
    }

    #[test]
    fn cost_of_rejects_bad_bounds() {
        assert!(cost_of(0, 5, 10, 1).is_err());
        assert!(cost_of(3, 5, 10, 0).is_err());
        assert!(cost_of(3, 5, 10, 4).is_err());
        assert!(cost_of(3, 11, 10, 1).is_err());
    }

    #[test]
    fn cost_monotonicity_grid() {
        // nondecreasing in n, keep, T; sign of the stop_step slope is
        // sign(n - keep)
        for n in 1..=6usize {
            for keep in 1..=n {
                for t in 5..=12u32 {
                    for stop in 0..t {
                        let c0 = cost_of(n, stop, t, keep).unwrap();
                        let c1 = cost_of(n, stop + 1, t, keep).unwrap();
                        let diff = c1 as i64 - c0 as i64;
                        let expected_sign = (n as i64 - keep as i64).signum();
                        assert_eq!(diff.signum(), expected_sign, "n={n} keep={keep}");
                        assert!(cost_of(n + 1, stop, t, keep).unwrap() >= c0);
                        assert!(cost_of(n, stop, t + 1, keep).unwrap() >= c0);
                        if keep < n {
                            assert!(cost_of(n, stop, t, keep + 1).unwrap() >= c0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rank_optional_places_none_last_with_index_ties() {
        let scores = vec![None, Some(0.3), None, Some(0.9)];
        assert_eq!(rank_optional_scores(&scores), vec![3, 1, 0, 2]);
        let all_none = vec![None, None, None];
        assert_eq!(rank_optional_scores(&all_none), vec![0, 1, 2]);
    }

    #[test]
    fn window_range_clamps_at_one() {
        assert_eq!(window_range(5, 1), (5, 5));
        assert_eq!(window_range(5, 3), (3, 5));
        assert_eq!(window_range(2, 10), (1, 2));
    }
}
