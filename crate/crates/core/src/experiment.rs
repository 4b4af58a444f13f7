//! End-to-end protocols: source-only baseline vs. latent-adapted pipeline on
//! a fixed target test set, and the target-fraction mixing sweep.
//!
//! Output layout under a protocol directory:
//!
//! ```text
//! config.toml                       resolved configuration
//! checkpoints/{vae,seg,naive}.ckpt
//! logs/{vae,seg,naive}_log.csv
//! eval/<method>/per_image.csv
//! eval/<method>/aggregate.csv
//! eval/<method>/masks/<id>.png      predicted probabilities, 8-bit
//! eval/endouda/clones/<id>.png      latent-search reconstructions
//! eval/endouda/traces.csv
//! eval/comparison.csv               when both methods ran
//! panels/<id>.png                   input | truth | clone | predictions
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::adapt::{predict_target, write_traces, AdaptationTrace};
use crate::config::RunConfig;
use crate::data::{load_dataset, mix_target_into_source, split, Dataset, ImageTensor, MaskTensor, Split};
use crate::metrics::{evaluate_method, ComparisonResult, EvalReport, Metric};
use crate::models::{SegModel, VaeModel};
use crate::synthetic::generate_synthetic;
use crate::training::{train_segmentation, train_vae, TrainLog, TrainOptions};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Naive,
    Endouda,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Naive, Method::Endouda];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Endouda => "endouda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "endouda" => Ok(Method::Endouda),
            other => Err(Error::config("method", format!("unknown method `{other}` (naive or endouda)"))),
        }
    }
}

/// The four fixed partitions every protocol works on.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source_train: Dataset,
    pub source_val: Dataset,
    /// Labelled target images that mixing may add to training.
    pub target_pool: Dataset,
    pub target_test: Dataset,
}

fn truncate(d: &Dataset, n: usize) -> Result<Dataset> {
    Dataset::new(d.items().iter().take(n).cloned().collect(), d.split())
}

/// Raw source and target domains, either generated or read from
/// `data.directory/{source,target}`.
pub fn load_domains(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.directory_data() {
        Some(dir) => {
            let size = cfg.model.encoder.input_size;
            let s = load_dataset(&dir.join("source"), Split::Train, size)?;
            let t = load_dataset(&dir.join("target"), Split::Test, size)?;
            Ok((truncate(&s, cfg.data.source_count)?, truncate(&t, cfg.data.target_count)?))
        }
        None => {
            let mut syn = cfg.data.synthetic.clone();
            syn.num_images = cfg.data.source_count.max(cfg.data.target_count);
            let (s, t) = generate_synthetic(&syn)?;
            Ok((truncate(&s, cfg.data.source_count)?, truncate(&t, cfg.data.target_count)?))
        }
    }
}

pub fn prepare_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    let (source, target) = load_domains(cfg)?;
    let v = cfg.data.val_fraction;
    let s = split(&source, &[1.0 - v, v], cfg.seed)?;
    let p = cfg.data.pool_fraction;
    let t = split(&target, &[p, 1.0 - p], cfg.seed.wrapping_add(1))?;
    Ok(Benchmark {
        source_train: s[0].clone(),
        source_val: s[1].clone(),
        target_pool: t[0].clone(),
        target_test: t[1].clone().with_split(Split::Test),
    })
}

/// Source training set with `fraction` of the target pool mixed in.
pub fn training_set(cfg: &RunConfig, bench: &Benchmark, fraction: f64) -> Result<Dataset> {
    let mixed = mix_target_into_source(&bench.source_train, &bench.target_pool, fraction, cfg.seed.wrapping_add(2))?;
    if mixed.sampled_target.iter().any(|n| bench.target_test.names().contains(n)) {
        return Err(Error::config("data", "mixed-in target images overlap the test set"));
    }
    Ok(mixed.dataset)
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn train_log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}_log.csv"))
    }

    pub fn eval_dir(&self, m: Method) -> PathBuf {
        self.root.join("eval").join(m.name())
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("eval").join("comparison.csv")
    }

    pub fn panels(&self) -> PathBuf {
        self.root.join("panels")
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Dependency(format!("{what} checkpoint not found at {}", path.display())));
    }
    Ok(())
}

pub fn train_vae_stage(cfg: &RunConfig, bench: &Benchmark, fraction: f64, layout: &Layout, opts: &TrainOptions) -> Result<(VaeModel, TrainLog)> {
    let train = training_set(cfg, bench, fraction)?;
    let mut vae = VaeModel::new(&cfg.model)?;
    let log = train_vae(&mut vae, &train, &bench.source_val, &cfg.vae, opts)?;
    vae.save(&layout.checkpoint("vae"))?;
    log.write_csv(&layout.train_log("vae"))?;
    Ok((vae, log))
}

pub fn train_seg_stage(cfg: &RunConfig, bench: &Benchmark, fraction: f64, layout: &Layout, opts: &TrainOptions) -> Result<(VaeModel, SegModel, TrainLog)> {
    let vae_path = layout.checkpoint("vae");
    require(&vae_path, "VAE")?;
    let vae = VaeModel::load(&vae_path, Some(&cfg.model))?;
    let train = training_set(cfg, bench, fraction)?;
    let mut seg = SegModel::with_encoder(&cfg.model, vae.encoder().clone())?;
    let log = train_segmentation(&mut seg, Some(&vae), &train, &bench.source_val, &cfg.seg, opts)?;
    seg.save(&layout.checkpoint("seg"))?;
    log.write_csv(&layout.train_log("seg"))?;
    Ok((vae, seg, log))
}

pub fn train_naive_stage(cfg: &RunConfig, bench: &Benchmark, fraction: f64, layout: &Layout, opts: &TrainOptions) -> Result<(SegModel, TrainLog)> {
    let train = training_set(cfg, bench, fraction)?;
    let mut naive_cfg = cfg.model.clone();
    naive_cfg.init_seed = cfg.model.init_seed.wrapping_add(100);
    let mut seg = SegModel::new(&naive_cfg)?;
    let log = train_segmentation(&mut seg, None, &train, &bench.source_val, &cfg.naive, opts)?;
    seg.save(&layout.checkpoint("naive"))?;
    log.write_csv(&layout.train_log("naive"))?;
    Ok((seg, log))
}

/// Predictions and report of one method on the target test set.
pub struct MethodRun {
    pub report: EvalReport,
    pub probs: MaskTensor,
    pub clones: Option<ImageTensor>,
    pub traces: Vec<AdaptationTrace>,
}

fn stack_masks(parts: Vec<MaskTensor>) -> Result<MaskTensor> {
    let views: Vec<_> = parts.iter().map(|p| p.data().view()).collect();
    let data = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    MaskTensor::probability(data)
}

fn stack_images(parts: Vec<ImageTensor>) -> Result<ImageTensor> {
    let range = parts.first().map(|p| p.range()).unwrap_or(crate::data::Range::Signed);
    let views: Vec<_> = parts.iter().map(|p| p.data().view()).collect();
    let data = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    ImageTensor::new(data, range)
}

pub fn evaluate_naive(cfg: &RunConfig, seg: &SegModel, test: &Dataset) -> Result<MethodRun> {
    let mut parts = Vec::new();
    let report = evaluate_method(test, "target_test", Method::Naive.name(), cfg.eval.batch_size, |x| {
        let p = seg.segment(x)?;
        parts.push(p.clone());
        Ok(p)
    })?;
    Ok(MethodRun {
        report,
        probs: stack_masks(parts)?,
        clones: None,
        traces: Vec::new(),
    })
}

pub fn evaluate_endouda(cfg: &RunConfig, vae: &VaeModel, seg: &SegModel, test: &Dataset) -> Result<MethodRun> {
    let (mut parts, mut clones, mut traces) = (Vec::new(), Vec::new(), Vec::new());
    let report = evaluate_method(test, "target_test", Method::Endouda.name(), cfg.eval.batch_size, |x| {
        let (p, out) = predict_target(x, vae, seg, &cfg.adapt)?;
        parts.push(p.clone());
        clones.push(out.clone);
        traces.extend(out.traces);
        Ok(p)
    })?;
    Ok(MethodRun {
        report,
        probs: stack_masks(parts)?,
        clones: Some(stack_images(clones)?),
        traces,
    })
}

fn save_gray(path: &Path, plane: &Array2<f32>) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let (h, w) = plane.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(plane[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

fn save_rgb(path: &Path, unit: &Array3<f32>) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let (_, h, w) = unit.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (unit[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Writes the report, per-image masks and (for the adapted method) clones
/// and traces.
pub fn write_method_run(layout: &Layout, method: Method, run: &MethodRun, test: &Dataset, traces: bool) -> Result<()> {
    let dir = layout.eval_dir(method);
    run.report.write(&dir)?;
    let names = test.names();
    for (i, name) in names.iter().enumerate() {
        save_gray(&dir.join("masks").join(format!("{name}.png")), &run.probs.plane(i))?;
    }
    if let Some(clones) = &run.clones {
        let unit = clones.to_unit();
        for (i, name) in names.iter().enumerate() {
            save_rgb(&dir.join("clones").join(format!("{name}.png")), &unit.image(i))?;
        }
    }
    if traces && !run.traces.is_empty() {
        write_traces(&dir.join("traces.csv"), &names, &run.traces)?;
    }
    Ok(())
}

/// Renders `input | truth | clone | naive | endouda` strips for the first
/// `count` test images (all when `count` is 0), using whatever method
/// outputs exist on disk. Returns the number of panels written.
pub fn render_panels(layout: &Layout, test: &Dataset, count: usize) -> Result<usize> {
    let n = if count == 0 { test.len() } else { count.min(test.len()) };
    let size = test.items().first().map_or(0, |it| it.image.dim().1) as u32;
    let gap = 2u32;
    for item in test.items().iter().take(n) {
        let mut tiles: Vec<RgbImage> = Vec::new();
        let img = &item.image;
        tiles.push(RgbImage::from_fn(size, size, |x, y| {
            let px = |c: usize| (img[[c.min(img.dim().0 - 1), y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        }));
        tiles.push(RgbImage::from_fn(size, size, |x, y| {
            let v = if item.mask[[y as usize, x as usize]] > 0.5 { 255 } else { 0 };
            Rgb([v, v, v])
        }));
        let clone = layout.eval_dir(Method::Endouda).join("clones").join(format!("{}.png", item.name));
        if clone.exists() {
            tiles.push(image::open(&clone)?.to_rgb8());
        }
        for m in Method::ALL {
            let p = layout.eval_dir(m).join("masks").join(format!("{}.png", item.name));
            if p.exists() {
                let g = image::open(&p)?.to_luma8();
                tiles.push(RgbImage::from_fn(size, size, |x, y| {
                    let v = if g.get_pixel(x, y)[0] > 127 { 255 } else { 0 };
                    Rgb([v, v, v])
                }));
            }
        }
        let width = tiles.len() as u32 * (size + gap) - gap;
        let mut panel = RgbImage::from_pixel(width, size, Rgb([255, 255, 255]));
        for (k, t) in tiles.iter().enumerate() {
            image::imageops::replace(&mut panel, t, (k as u32 * (size + gap)) as i64, 0);
        }
        let path = layout.panels().join(format!("{}.png", item.name));
        crate::io::ensure_parent(&path)?;
        panel.save(&path)?;
    }
    Ok(n)
}

/// Result of one full protocol run at a given target fraction.
pub struct ProtocolResult {
    pub fraction: f64,
    pub reports: Vec<EvalReport>,
    pub comparison: Option<ComparisonResult>,
}

impl ProtocolResult {
    pub fn report(&self, m: Method) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == m.name())
    }
}

/// Trains the requested methods on source (+ `fraction` of the target pool)
/// and evaluates them on the fixed target test set, writing everything
/// under `root`.
pub fn run_protocol(cfg: &RunConfig, bench: &Benchmark, fraction: f64, root: &Path, methods: &[Method]) -> Result<ProtocolResult> {
    let layout = Layout::new(root);
    let mut provenance = cfg.clone();
    provenance.output_dir = root.to_path_buf();
    provenance.sweep.fractions = vec![fraction];
    provenance.write_provenance()?;
    let opts = TrainOptions::default();
    let mut reports = Vec::new();
    for &m in methods {
        let run = match m {
            Method::Naive => {
                let (seg, _) = train_naive_stage(cfg, bench, fraction, &layout, &opts)?;
                evaluate_naive(cfg, &seg, &bench.target_test)?
            }
            Method::Endouda => {
                train_vae_stage(cfg, bench, fraction, &layout, &opts)?;
                let (vae, seg, _) = train_seg_stage(cfg, bench, fraction, &layout, &opts)?;
                evaluate_endouda(cfg, &vae, &seg, &bench.target_test)?
            }
        };
        write_method_run(&layout, m, &run, &bench.target_test, cfg.eval.write_traces)?;
        log::info!(
            "fraction {fraction}: {} mean IoU {:.4}",
            m.name(),
            run.report.summary(Metric::Iou).mean
        );
        reports.push(run.report);
    }
    let comparison = compare_if_both(&layout, &reports)?;
    render_panels(&layout, &bench.target_test, cfg.eval.panels)?;
    Ok(ProtocolResult {
        fraction,
        reports,
        comparison,
    })
}

/// Writes `eval/comparison.csv` (EndoUDA minus naive) when both reports
/// are present.
pub fn compare_if_both(layout: &Layout, reports: &[EvalReport]) -> Result<Option<ComparisonResult>> {
    let find = |m: Method| reports.iter().find(|r| r.method == m.name());
    match (find(Method::Endouda), find(Method::Naive)) {
        (Some(a), Some(b)) => {
            let cmp = ComparisonResult::compare(a, b)?;
            cmp.write_csv(&layout.comparison())?;
            Ok(Some(cmp))
        }
        _ => Ok(None),
    }
}

pub fn fraction_dir(root: &Path, fraction: f64) -> PathBuf {
    root.join(format!("f_{fraction:.2}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: String,
    pub iou: (f64, f64),
    pub dice: (f64, f64),
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub n: usize,
}

impl SweepRow {
    fn from_report(fraction: f64, r: &EvalReport) -> Self {
        let s = |m| {
            let v = r.summary(m);
            (v.mean, v.std)
        };
        Self {
            fraction,
            method: r.method.clone(),
            iou: s(Metric::Iou),
            dice: s(Metric::Dice),
            precision: s(Metric::Precision),
            recall: s(Metric::Recall),
            n: r.records.len(),
        }
    }
}

pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub protocols: Vec<ProtocolResult>,
}

impl SweepResult {
    pub fn iou_curve(&self, m: Method) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.method == m.name()).map(|r| (r.fraction, r.iou.0)).collect()
    }
}

pub fn write_sweep_table(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = crate::io::csv_writer(path)?;
    w.write_record([
        "fraction",
        "method",
        "iou_mean",
        "iou_std",
        "dice_mean",
        "dice_std",
        "precision_mean",
        "precision_std",
        "recall_mean",
        "recall_std",
        "n",
    ])?;
    for r in rows {
        w.write_record([
            r.fraction.to_string(),
            r.method.clone(),
            r.iou.0.to_string(),
            r.iou.1.to_string(),
            r.dice.0.to_string(),
            r.dice.1.to_string(),
            r.precision.0.to_string(),
            r.precision.1.to_string(),
            r.recall.0.to_string(),
            r.recall.1.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Line plot of mean IoU against target fraction, one series per method.
pub fn write_sweep_plot(path: &Path, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let all: Vec<f64> = series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)).collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let (lo, hi) = if hi - lo < 1e-3 { (lo - 0.05, hi + 0.05) } else { (lo - 0.02, hi + 0.02) };
    let xmax = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let px = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\">target fraction</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">mean IoU</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        xl = h - 12.0,
        cy = h / 2.0,
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.3}</text>\n",
            pad - 4.0,
            py(v) + 4.0
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        svg += &format!("<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" "));
        for (x, y) in pts {
            svg += &format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{c}\"/>\n", px(*x), py(*y));
            if i == 0 {
                svg += &format!("<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{x}</text>\n", px(*x), h - pad + 14.0);
            }
        }
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>\n",
            w - pad - 70.0,
            pad + 14.0 * i as f64
        );
    }
    svg += "</svg>\n";
    crate::io::ensure_parent(path)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Runs the protocol at every configured fraction under `root/f_<fraction>`
/// and writes `root/table.csv` and `root/iou_vs_fraction.svg`.
pub fn run_mixing_sweep(cfg: &RunConfig, bench: &Benchmark, root: &Path, methods: &[Method]) -> Result<SweepResult> {
    let mut rows = Vec::new();
    let mut protocols = Vec::new();
    for &f in &cfg.sweep.fractions {
        let res = run_protocol(cfg, bench, f, &fraction_dir(root, f), methods)?;
        for m in methods {
            if let Some(r) = res.report(*m) {
                rows.push(SweepRow::from_report(f, r));
            }
        }
        protocols.push(res);
    }
    write_sweep_table(&root.join("table.csv"), &rows)?;
    let result = SweepResult { rows, protocols };
    let series: Vec<_> = methods.iter().map(|m| (m.name().to_string(), result.iou_curve(*m))).collect();
    write_sweep_plot(&root.join("iou_vs_fraction.svg"), &series)?;
    Ok(result)
}
