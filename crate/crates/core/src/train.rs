//! Training loop, evaluation, bin-count sweep, coverage study and analysis
//! data emission.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{bin_density_profile, default_bandwidth, nearest_center_locality};
use crate::config::{Precision, TrainConfig, TrainingMode};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::losses::{bins_loss, chamfer_1d_reduced, total_loss, ResponseBatch};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{bin_centers, HeadKind, LevelVars, Model, ParamStore, PyramidFeatures};
use crate::par;
use crate::query::{
    coverage_report, extract_gt_depths, generate_queries, naive_coverage, naive_subsample_targets, pixel_gather,
    query_bins, BoxQuery, CoverageReport,
};
use crate::real::Real;
use crate::tensor::{read_checkpoint, write_checkpoint, AdamW, Tape, Tensor, Var};

pub const LOSS_CSV_HEADER: &str = "step,pixel_loss,bins_loss,total";
pub const BREAKDOWN_CSV_HEADER: &str = "step,level,class,weight,chamfer_sum,weighted";
pub const SWEEP_CSV_HEADER: &str = "n_bins,rel";
pub const COVERAGE_CSV_HEADER: &str = "mode,psci,px_covered,coverage_pct";
pub const DENSITY_CSV_HEADER: &str = "image,row,col,source,depth,density";

pub const CHECKPOINT_FILE: &str = "checkpoint.lbk";
pub const LOSS_FILE: &str = "loss.csv";
pub const BREAKDOWN_FILE: &str = "bins_breakdown.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Images drawn by `analyze`.
pub const ANALYSIS_IMAGES: usize = 4;
const EVAL_BATCH: usize = 4;

// Independent generator streams, one per purpose, so that changing how one
// kind of randomness is consumed never shifts another.
const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_BOXES: u64 = 2;
const STREAM_GT: u64 = 3;
const STREAM_NAIVE: u64 = 4;
const STREAM_ANALYSIS: u64 = 5;
const STREAM_COVERAGE: u64 = 6;

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub pixel: f64,
    pub bins: f64,
    pub total: f64,
}

impl LossRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.pixel, self.bins, self.total)
    }
}

/// One `(level, size class)` term of the bins loss at a step. `chamfer_sum`
/// is the unweighted Chamfer sum of the class's queries divided by the batch
/// size; `weighted` is that times `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BreakdownRow {
    pub step: usize,
    pub level: usize,
    pub class: usize,
    pub weight: f64,
    pub chamfer_sum: f64,
    pub weighted: f64,
}

impl BreakdownRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.level, self.class, self.weight, self.chamfer_sum, self.weighted
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<LossRow>,
    pub breakdown: Vec<BreakdownRow>,
    /// Final parameters, widened to `f64`.
    pub params: Vec<(String, Tensor<f64>)>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|r| r.total)
    }
}

/// Checks that a corpus matches the configured resolution and depth range.
pub fn check_corpus(cfg: &TrainConfig, corpus: &[SceneSample]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.extent() != cfg.extent() {
            return Err(Error::Invalid(format!(
                "scene {i} is {}x{} but the config expects {}x{}",
                s.height(),
                s.width(),
                cfg.height,
                cfg.width
            )));
        }
        s.validate(cfg.range())
            .map_err(|e| Error::Invalid(format!("scene {i} does not fit the configured depth range: {e}")))?;
        if s.valid_count() == 0 {
            return Err(Error::Invalid(format!("scene {i} has no valid pixels")));
        }
    }
    Ok(())
}

fn batch_image<T: Real>(batch: &[&SceneSample]) -> Result<Tensor<T>> {
    let (h, w) = batch[0].extent();
    let mut data = Vec::with_capacity(batch.len() * 3 * h * w);
    for s in batch {
        data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![batch.len(), 3, h, w], data)
}

fn fresh_store<T: Real>(cfg: &TrainConfig) -> Result<(Model, ParamStore<T>)> {
    let model = Model::new(cfg.model_config())?;
    let store = model.init_params(&mut stream(cfg.seed, STREAM_INIT));
    Ok((model, store))
}

/// Builds the configured model and loads `params` into it. Names and shapes
/// must match exactly.
pub fn load_model<T: Real>(cfg: &TrainConfig, params: &[(String, Tensor<f64>)]) -> Result<(Model, ParamStore<T>)> {
    let (model, mut store) = fresh_store::<T>(cfg)?;
    store.load(params.iter().map(|(n, t)| (n.clone(), t.cast())).collect())?;
    Ok((model, store))
}

pub fn read_params(path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn write_params(path: &Path, params: &[(String, Tensor<f64>)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, params)?;
    out.flush()?;
    Ok(())
}

fn widen<T: Real>(store: &ParamStore<T>) -> Vec<(String, Tensor<f64>)> {
    store.entries().iter().map(|(n, t)| (n.clone(), t.cast())).collect()
}

struct Sinks {
    loss: BufWriter<File>,
    breakdown: Option<BufWriter<File>>,
}

/// Trains on `corpus`. With `out`, writes the loss CSV, the config, the
/// checkpoint at every epoch end and at the end, and the bins breakdown when
/// enabled. `observer` sees every loss row as it is produced.
pub fn train_with_observer(
    cfg: &TrainConfig,
    corpus: &[SceneSample],
    out: Option<&Path>,
    observer: &mut dyn FnMut(&LossRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_corpus(cfg, corpus)?;
    match cfg.precision {
        Precision::F64 => train_impl::<f64>(cfg, corpus, out, observer),
        Precision::F32 => train_impl::<f32>(cfg, corpus, out, observer),
    }
}

pub fn train(cfg: &TrainConfig, corpus: &[SceneSample], out: Option<&Path>) -> Result<TrainReport> {
    train_with_observer(cfg, corpus, out, &mut |_| {})
}

fn train_impl<T: Real>(
    cfg: &TrainConfig,
    corpus: &[SceneSample],
    out: Option<&Path>,
    observer: &mut dyn FnMut(&LossRow),
) -> Result<TrainReport> {
    let (model, mut store) = fresh_store::<T>(cfg)?;
    let mut opt = AdamW::<T>::new(cfg.schedule(), cfg.weight_decay);
    opt.beta1 = cfg.adam_beta1;
    opt.beta2 = cfg.adam_beta2;
    opt.eps = cfg.adam_eps;

    let mut sinks = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
            let mut loss = BufWriter::new(File::create(dir.join(LOSS_FILE))?);
            writeln!(loss, "{LOSS_CSV_HEADER}")?;
            let breakdown = if cfg.breakdown {
                let mut b = BufWriter::new(File::create(dir.join(BREAKDOWN_FILE))?);
                writeln!(b, "{BREAKDOWN_CSV_HEADER}")?;
                Some(b)
            } else {
                None
            };
            Some(Sinks { loss, breakdown })
        }
        None => None,
    };

    let sizes = cfg.effective_box_sizes()?;
    let total_steps = cfg.total_steps(corpus.len());
    let mut batch_rng = stream(cfg.seed, STREAM_BATCH);
    let mut box_rng = stream(cfg.seed, STREAM_BOXES);
    let mut gt_rng = stream(cfg.seed, STREAM_GT);
    let mut naive_rng = stream(cfg.seed, STREAM_NAIVE);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport {
        losses: Vec::with_capacity(total_steps),
        breakdown: Vec::new(),
        params: Vec::new(),
    };

    for step in 0..total_steps {
        if cursor == order.len() {
            order = (0..corpus.len()).collect();
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&SceneSample> = order[cursor..end].iter().map(|&i| &corpus[i]).collect();
        cursor = end;

        let mut tape = Tape::<T>::new();
        let mut rngs = SamplingRngs {
            boxes: &mut box_rng,
            gt: &mut gt_rng,
            naive: &mut naive_rng,
        };
        let StepGraph {
            pixel,
            bins,
            total: loss,
            responses,
        } = step_graph(cfg, &model, &store, &mut tape, &batch, &sizes, &mut rngs)?;
        let row = LossRow {
            step,
            pixel: tape.value(pixel).item()?.as_f64(),
            bins: match bins {
                Some(b) => tape.value(b).item()?.as_f64(),
                None => 0.0,
            },
            total: tape.value(loss).item()?.as_f64(),
        };
        if !row.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if cfg.breakdown {
            if let Some(r) = &responses {
                let rows = breakdown_rows(cfg, &tape, r, step, batch.len())?;
                if let Some(out) = sinks.as_mut().and_then(|s| s.breakdown.as_mut()) {
                    for b in &rows {
                        writeln!(out, "{}", b.csv_row())?;
                    }
                }
                report.breakdown.extend(rows);
            }
        }

        tape.backward(loss)?;
        let grads = store.grads(&tape);
        drop(tape);
        let grad_refs: Vec<Option<&Tensor<T>>> = grads.iter().map(Option::as_ref).collect();
        let mut params: Vec<&mut Tensor<T>> = store.entries_mut().collect();
        opt.step(&mut params, &grad_refs, step, total_steps)?;

        if let Some(s) = sinks.as_mut() {
            writeln!(s.loss, "{}", row.csv_row())?;
        }
        observer(&row);
        report.losses.push(row);

        if cursor == order.len() {
            if let (Some(dir), Some(s)) = (out, sinks.as_mut()) {
                s.loss.flush()?;
                write_params(&dir.join(CHECKPOINT_FILE), &widen(&store))?;
            }
        }
    }

    report.params = widen(&store);
    if let (Some(dir), Some(mut s)) = (out, sinks) {
        s.loss.flush()?;
        if let Some(b) = s.breakdown.as_mut() {
            b.flush()?;
        }
        write_params(&dir.join(CHECKPOINT_FILE), &report.params)?;
    }
    Ok(report)
}

struct SamplingRngs<'a> {
    boxes: &'a mut ChaCha8Rng,
    gt: &'a mut ChaCha8Rng,
    naive: &'a mut ChaCha8Rng,
}

struct StepGraph<T: Real> {
    pixel: Var,
    bins: Option<Var>,
    total: Var,
    responses: Option<ResponseBatch<T>>,
}

/// Records the full training objective for one batch on `tape`.
fn step_graph<T: Real>(
    cfg: &TrainConfig,
    model: &Model,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    batch: &[&SceneSample],
    sizes: &[usize],
    rngs: &mut SamplingRngs<'_>,
) -> Result<StepGraph<T>> {
    let x = tape.constant(batch_image(batch)?);
    let fwd = model.forward(tape, store, x)?;
    let gt: Vec<T> = batch
        .iter()
        .flat_map(|s| s.depth.data().iter().map(|&d| T::lit(d as f64)))
        .collect();
    let mask: Vec<bool> = batch.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let pixel = tape.silog(
        fwd.depth,
        Arc::new(gt),
        Arc::new(mask),
        T::lit(cfg.loss.si_lambda),
        T::lit(cfg.loss.si_alpha),
    )?;
    let responses = match cfg.training_mode {
        TrainingMode::PixelOnly => None,
        TrainingMode::Naive => naive_responses(cfg, tape, &fwd.levels, batch, rngs.naive)?,
        TrainingMode::Qr | TrainingMode::QrFoveated => {
            query_responses(cfg, model, tape, store, &fwd.pyramid, batch, sizes, rngs.boxes, rngs.gt)?
        }
    };
    let bins = responses
        .as_ref()
        .map(|r| bins_loss(tape, r, cfg.range(), cfg.weighting(), cfg.loss.chamfer_reduction, batch.len()))
        .transpose()?;
    let total = total_loss(tape, pixel, bins, cfg.loss.beta)?;
    Ok(StepGraph {
        pixel,
        bins,
        total,
        responses,
    })
}

/// Total training loss of `batch` under `params` in 64-bit, with queries and
/// ground-truth subsets drawn from `sample_seed` (identical on every call),
/// and the gradient of every parameter when `with_grads` is set.
pub fn objective(
    cfg: &TrainConfig,
    params: &[(String, Tensor<f64>)],
    batch: &[SceneSample],
    sample_seed: u64,
    with_grads: bool,
) -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
    cfg.validate()?;
    check_corpus(cfg, batch)?;
    let (model, store) = load_model::<f64>(cfg, params)?;
    let refs: Vec<&SceneSample> = batch.iter().collect();
    let (mut boxes, mut gt, mut naive) = (
        stream(sample_seed, STREAM_BOXES),
        stream(sample_seed, STREAM_GT),
        stream(sample_seed, STREAM_NAIVE),
    );
    let mut rngs = SamplingRngs {
        boxes: &mut boxes,
        gt: &mut gt,
        naive: &mut naive,
    };
    let mut tape = Tape::new();
    let graph = step_graph(cfg, &model, &store, &mut tape, &refs, &cfg.effective_box_sizes()?, &mut rngs)?;
    let value = tape.value(graph.total).item()?;
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(graph.total)?;
    Ok((value, store.grads(&tape)))
}

/// Fresh parameters for `cfg`, as initialized at the start of training.
pub fn initial_params(cfg: &TrainConfig) -> Result<Vec<(String, Tensor<f64>)>> {
    Ok(widen(&fresh_store::<f64>(cfg)?.1))
}

/// Ground-truth sets are kept sorted so the Chamfer matching does not have to
/// re-sort them at every level.
fn sorted_depths<T: Real>(mut d: Vec<f32>) -> Vec<T> {
    d.sort_by(f32::total_cmp);
    d.into_iter().map(|v| T::lit(v as f64)).collect()
}

/// Boxes of every size class on every image, paired with the valid depths
/// they cover; boxes over fully invalid regions are dropped.
#[allow(clippy::too_many_arguments)]
fn query_responses<T: Real>(
    cfg: &TrainConfig,
    model: &Model,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pyramid: &PyramidFeatures,
    batch: &[&SceneSample],
    sizes: &[usize],
    box_rng: &mut ChaCha8Rng,
    gt_rng: &mut ChaCha8Rng,
) -> Result<Option<ResponseBatch<T>>> {
    let extent = cfg.extent();
    let mut queries: Vec<(usize, BoxQuery)> = Vec::new();
    let mut targets = Vec::new();
    for (n, s) in batch.iter().enumerate() {
        let set = generate_queries(box_rng, extent, sizes, cfg.boxes_per_class)?;
        for b in set.boxes {
            if let Some(t) = extract_gt_depths(s.depth.data(), &s.mask, extent, &b, cfg.gt_cap, gt_rng) {
                queries.push((n, b));
                targets.push(sorted_depths(t));
            }
        }
    }
    if queries.is_empty() {
        return Ok(None);
    }
    let levels = query_bins(model, tape, store, pyramid, &queries, extent, cfg.roi_samples)?;
    Ok(Some(ResponseBatch {
        widths: levels.iter().map(|l| l.widths).collect(),
        targets: Arc::new(targets),
        class: queries.iter().map(|(_, b)| b.size_class).collect(),
        image: queries.iter().map(|(n, _)| *n).collect(),
    }))
}

/// Per-pixel bins at randomly sampled valid pixels, read at every level from
/// the cell containing the pixel, against the valid depths of a window
/// centered on it.
fn naive_responses<T: Real>(
    cfg: &TrainConfig,
    tape: &mut Tape<T>,
    levels: &[LevelVars],
    batch: &[&SceneSample],
    rng: &mut ChaCha8Rng,
) -> Result<Option<ResponseBatch<T>>> {
    let extent = cfg.extent();
    let mut pixels = Vec::new();
    let mut targets = Vec::new();
    for (n, s) in batch.iter().enumerate() {
        let picked = naive_subsample_targets(s.depth.data(), &s.mask, extent, cfg.naive_window, cfg.naive_locations, rng)?;
        for t in picked {
            pixels.push((n, t.row, t.col));
            targets.push(sorted_depths(t.depths));
        }
    }
    if pixels.is_empty() {
        return Ok(None);
    }
    let mut widths = Vec::with_capacity(levels.len());
    for l in levels {
        let s = tape.shape(l.widths).to_vec();
        let spec = pixel_gather::<T>(&pixels, (s[2], s[3]), extent)?;
        widths.push(tape.gather(l.widths, Arc::new(spec))?);
    }
    Ok(Some(ResponseBatch {
        widths,
        targets: Arc::new(targets),
        class: vec![0; pixels.len()],
        image: pixels.iter().map(|p| p.0).collect(),
    }))
}

fn breakdown_rows<T: Real>(
    cfg: &TrainConfig,
    tape: &Tape<T>,
    responses: &ResponseBatch<T>,
    step: usize,
    n_images: usize,
) -> Result<Vec<BreakdownRow>> {
    let n_levels = responses.widths.len();
    let n_classes = responses.class.iter().max().map_or(0, |k| k + 1);
    let weighting = cfg.weighting();
    let mut rows = Vec::with_capacity(n_levels * n_classes);
    for (level, &w) in responses.widths.iter().enumerate() {
        let centers = bin_centers(tape.value(w), cfg.range())?;
        let bins = centers.shape()[1];
        let mut sums = vec![0.0; n_classes];
        for (row, target) in responses.targets.iter().enumerate() {
            let c = &centers.data()[row * bins..(row + 1) * bins];
            sums[responses.class[row]] += chamfer_1d_reduced(c, target, cfg.loss.chamfer_reduction)?.0.as_f64();
        }
        for (class, sum) in sums.into_iter().enumerate() {
            let weight = weighting.weight(n_levels, level, class);
            let chamfer_sum = sum / n_images as f64;
            rows.push(BreakdownRow {
                step,
                level,
                class,
                weight,
                chamfer_sum,
                weighted: weight * chamfer_sum,
            });
        }
    }
    Ok(rows)
}

/// Per-image predicted depth, row-major, for every sample.
pub fn predict_depths(cfg: &TrainConfig, params: &[(String, Tensor<f64>)], samples: &[SceneSample]) -> Result<Vec<Vec<f64>>> {
    match cfg.precision {
        Precision::F64 => predict_impl::<f64>(cfg, params, samples),
        Precision::F32 => predict_impl::<f32>(cfg, params, samples),
    }
}

fn predict_impl<T: Real>(cfg: &TrainConfig, params: &[(String, Tensor<f64>)], samples: &[SceneSample]) -> Result<Vec<Vec<f64>>> {
    let (model, store) = load_model::<T>(cfg, params)?;
    let chunks: Vec<&[SceneSample]> = samples.chunks(EVAL_BATCH).collect();
    let per_chunk = par::map(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let batch: Vec<&SceneSample> = chunk.iter().collect();
        let mut tape = Tape::<T>::new();
        let x = tape.constant(batch_image(&batch)?);
        let fwd = model.forward(&mut tape, &store, x)?;
        let depth = tape.value(fwd.depth);
        let per = depth.numel() / batch.len();
        Ok(depth.data().chunks(per).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect())
    });
    let mut out = Vec::with_capacity(samples.len());
    for chunk in per_chunk {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Mean over images of the per-image metrics.
pub fn evaluate(cfg: &TrainConfig, params: &[(String, Tensor<f64>)], corpus: &[SceneSample]) -> Result<MetricsReport> {
    check_corpus(cfg, corpus)?;
    let preds = predict_depths(cfg, params, corpus)?;
    let reports = par::map_range(corpus.len(), |i| {
        let gt: Vec<f64> = corpus[i].depth.data().iter().map(|&d| d as f64).collect();
        compute_metrics(&preds[i], &gt, &corpus[i].mask)
    });
    MetricsReport::mean(&reports.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Trains and evaluates once per `N_seed` value with a shared seed. Returns
/// `(total bins, REL)` sorted by bin count.
pub fn sweep_bins(
    cfg: &TrainConfig,
    values: &[usize],
    train_corpus: &[SceneSample],
    eval_corpus: &[SceneSample],
    observer: &mut dyn FnMut(usize, &LossRow),
) -> Result<Vec<(usize, f64)>> {
    if values.len() < 2 {
        return Err(Error::Config("a bin sweep needs at least two N_seed values".into()));
    }
    if cfg.training_mode == TrainingMode::PixelOnly {
        return Err(Error::Config("a bin sweep needs a LocalBins training mode".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let run = TrainConfig {
            n_seed: v,
            ..cfg.clone()
        };
        run.validate()?;
        let report = train_with_observer(&run, train_corpus, None, &mut |r| observer(v, r))?;
        let metrics = evaluate(&run, &report.params, eval_corpus)?;
        rows.push((run.model_config().output_bins(), metrics.rel));
    }
    rows.sort_by_key(|r| r.0);
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageRow {
    pub naive: bool,
    pub report: CoverageReport,
}

impl CoverageRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            if self.naive { "naive" } else { "qr" },
            self.report.psci,
            self.report.px_covered,
            self.report.coverage_pct
        )
    }
}

pub const NAIVE_PSCI: [usize; 2] = [4096, 8192];
pub const QR_PSCI: [usize; 3] = [250, 500, 1000];

/// Point-set comparisons per image and union pixel coverage for the naive
/// scheme and for region queries at the configured resolution. Larger budgets
/// extend the smaller ones, so coverage is compared on nested sets.
pub fn coverage_study(cfg: &TrainConfig) -> Result<Vec<CoverageRow>> {
    let extent = cfg.extent();
    let mut rng = stream(cfg.seed, STREAM_COVERAGE);
    let mut rows = Vec::new();
    let full_mask = vec![true; extent.0 * extent.1];
    let flat = vec![1.0f32; extent.0 * extent.1];
    let largest = *NAIVE_PSCI.iter().max().unwrap();
    let naive = naive_subsample_targets(&flat, &full_mask, extent, cfg.naive_window, largest, &mut rng)?;
    for psci in NAIVE_PSCI {
        rows.push(CoverageRow {
            naive: true,
            report: naive_coverage(&naive[..psci.min(naive.len())], extent),
        });
    }
    let sizes = cfg.effective_box_sizes()?;
    let largest = *QR_PSCI.iter().max().unwrap();
    let per_class = largest.div_ceil(sizes.len());
    let set = generate_queries(&mut rng, extent, &sizes, per_class)?;
    for psci in QR_PSCI {
        let m = psci / sizes.len();
        rows.push(CoverageRow {
            naive: false,
            report: coverage_report(&set.truncated(m), extent),
        });
    }
    Ok(rows)
}

/// Locality curve at one pixel: mean nearest-center distance per window size.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityRow {
    pub image: usize,
    /// `None` for the per-image mean row.
    pub pixel: Option<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl LocalityRow {
    pub fn csv_row(&self) -> String {
        let (kind, r, c) = match self.pixel {
            Some((r, c)) => ("location", r.to_string(), c.to_string()),
            None => ("mean", String::new(), String::new()),
        };
        let d: Vec<String> = self.distances.iter().map(f64::to_string).collect();
        format!("{},{kind},{r},{c},{}", self.image, d.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityRow {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    /// `"pred"` for predicted centers, `"gt"` for the ground-truth window.
    pub source: &'static str,
    pub depth: f64,
    pub density: f64,
}

impl DensityRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.image, self.row, self.col, self.source, self.depth, self.density
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub windows: Vec<usize>,
    pub locality: Vec<LocalityRow>,
    pub density: Vec<DensityRow>,
}

impl AnalysisReport {
    pub fn locality_header(&self) -> String {
        let w: Vec<String> = self.windows.iter().map(|w| format!("w{w}")).collect();
        format!("image,kind,row,col,{}", w.join(","))
    }

    /// Fraction of sampled locations whose distance never decreases as the
    /// window grows.
    pub fn nondecreasing_fraction(&self) -> f64 {
        let locs: Vec<&LocalityRow> = self.locality.iter().filter(|r| r.pixel.is_some()).collect();
        if locs.is_empty() {
            return 0.0;
        }
        let ok = locs
            .iter()
            .filter(|r| r.distances.windows(2).all(|p| p[1] >= p[0]))
            .count();
        ok as f64 / locs.len() as f64
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut loc = BufWriter::new(File::create(dir.join("locality.csv"))?);
        writeln!(loc, "{}", self.locality_header())?;
        for r in &self.locality {
            writeln!(loc, "{}", r.csv_row())?;
        }
        loc.flush()?;
        let mut den = BufWriter::new(File::create(dir.join("density.csv"))?);
        writeln!(den, "{DENSITY_CSV_HEADER}")?;
        for r in &self.density {
            writeln!(den, "{}", r.csv_row())?;
        }
        den.flush()?;
        Ok(())
    }
}

fn window_depths(s: &SceneSample, row: usize, col: usize, window: usize) -> Vec<f64> {
    let (h, w) = s.extent();
    let r = window / 2;
    let mut out = Vec::new();
    for y in row.saturating_sub(r)..(row + r + 1).min(h) {
        for x in col.saturating_sub(r)..(col + r + 1).min(w) {
            if s.mask[y * w + x] {
                out.push(s.depth.data()[y * w + x] as f64);
            }
        }
    }
    out
}

/// Locality curves at `n_locations` random valid pixels of up to
/// [`ANALYSIS_IMAGES`] random images, with per-image means, and density
/// curves of predicted centers and ground-truth windows at the first
/// `density_locations` of those pixels.
pub fn analyze(
    cfg: &TrainConfig,
    params: &[(String, Tensor<f64>)],
    corpus: &[SceneSample],
    n_locations: usize,
) -> Result<AnalysisReport> {
    check_corpus(cfg, corpus)?;
    if cfg.training_mode == TrainingMode::PixelOnly || cfg.model_config().head != HeadKind::LocalBins {
        return Err(Error::Config("analysis needs a LocalBins model".into()));
    }
    if n_locations == 0 {
        return Err(Error::Config("analysis needs at least one location".into()));
    }
    let mut rng = stream(cfg.seed, STREAM_ANALYSIS);
    let mut images: Vec<usize> = (0..corpus.len()).collect();
    images.shuffle(&mut rng);
    images.truncate(ANALYSIS_IMAGES);
    let (model, store) = load_model::<f64>(cfg, params)?;
    let windows = cfg.analysis_windows.clone();
    let largest = *windows.iter().max().expect("validated windows");
    let mut report = AnalysisReport {
        windows: windows.clone(),
        locality: Vec::new(),
        density: Vec::new(),
    };
    for &img in &images {
        let s = &corpus[img];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(batch_image(&[s])?);
        let fwd = model.forward(&mut tape, &store, x)?;
        let top = fwd.levels.last().expect("LocalBins levels").widths;
        let centers = bin_centers(tape.value(top), cfg.range())?;
        let (h, w) = s.extent();
        let bins = centers.shape()[1];
        let valid: Vec<usize> = (0..h * w).filter(|&i| s.mask[i]).collect();
        let mut rows = Vec::with_capacity(n_locations);
        for k in 0..n_locations {
            let i = valid[rng.random_range(0..valid.len())];
            let (r, c) = (i / w, i % w);
            let pc: Vec<f64> = (0..bins).map(|b| centers.data()[b * h * w + i]).collect();
            let wins: Vec<Vec<f64>> = windows.iter().map(|&win| window_depths(s, r, c, win)).collect();
            let distances = nearest_center_locality(&pc, &wins)?;
            if k < cfg.density_locations {
                let gt = window_depths(s, r, c, largest);
                for (source, values) in [("pred", &pc), ("gt", &gt)] {
                    let bw = default_bandwidth(cfg.range(), values.len());
                    for (depth, density) in bin_density_profile(values, cfg.range(), bw)? {
                        report.density.push(DensityRow {
                            image: img,
                            row: r,
                            col: c,
                            source,
                            depth,
                            density,
                        });
                    }
                }
            }
            rows.push(LocalityRow {
                image: img,
                pixel: Some((r, c)),
                distances,
            });
        }
        let mean: Vec<f64> = (0..windows.len())
            .map(|j| rows.iter().map(|r| r.distances[j]).sum::<f64>() / rows.len() as f64)
            .collect();
        report.locality.extend(rows);
        report.locality.push(LocalityRow {
            image: img,
            pixel: None,
            distances: mean,
        });
    }
    Ok(report)
}
