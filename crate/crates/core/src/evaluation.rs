//! Pixel-level metrics, sliding-window inference, probability-difference maps
//! and the ablation driver.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::{Config, LossMode};
use crate::datasets::{FundusSample, LabelMask};
use crate::error::{shape_err, Error, Result};
use crate::imageio;
use crate::network::{IlcMode, Model};
use crate::tensor::Tensor;
use crate::training;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn specificity(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }

    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub acc: f64,
    pub spe: f64,
    pub sen: f64,
    pub threshold: f64,
    pub fov_restricted: bool,
    pub dataset: String,
    pub config_hash: String,
    pub confusion: Confusion,
}

/// Area under the ROC curve by the trapezoidal rule over the unique scores.
pub fn roc_auc(scores: &[f32], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), positive.len()));
    }
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Degenerate("AUC is undefined when only one class is present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp + tp0) / 2.0;
    }
    Ok(area / (pos * neg))
}

fn included(fov: Option<&Array2<bool>>, y: usize, x: usize) -> bool {
    fov.is_none_or(|f| f[[y, x]])
}

pub fn confusion(probs: ArrayView2<f32>, label: &LabelMask, fov: Option<&Array2<bool>>, threshold: f64) -> Result<Confusion> {
    if probs.dim() != label.dim() || fov.is_some_and(|f| f.dim() != label.dim()) {
        return Err(shape_err!("probabilities {:?} do not match label {:?}", probs.dim(), label.dim()));
    }
    let mut c = Confusion::default();
    for ((y, x), &p) in probs.indexed_iter() {
        if !included(fov, y, x) {
            continue;
        }
        let pred = p as f64 >= threshold;
        match (pred, label.mask()[[y, x]] == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// One prediction with its ground truth and optional field-of-view mask.
pub struct Scored<'a> {
    pub probs: ArrayView2<'a, f32>,
    pub label: &'a LabelMask,
    pub fov: Option<&'a Array2<bool>>,
}

/// Metrics over the pooled pixels of all `items`.
pub fn pooled_metrics(items: &[Scored], threshold: f64, fov_restricted: bool) -> Result<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut scores = Vec::new();
    let mut positive = Vec::new();
    let mut conf = Confusion::default();
    for it in items {
        let fov = if fov_restricted { it.fov } else { None };
        conf.add(&confusion(it.probs, it.label, fov, threshold)?);
        for ((y, x), &p) in it.probs.indexed_iter() {
            if included(fov, y, x) {
                scores.push(p);
                positive.push(it.label.mask()[[y, x]] == 1);
            }
        }
    }
    let auc = roc_auc(&scores, &positive)?;
    Ok(MetricsReport {
        auc,
        acc: conf.accuracy(),
        spe: conf.specificity(),
        sen: conf.sensitivity(),
        threshold,
        fov_restricted,
        dataset: String::new(),
        config_hash: String::new(),
        confusion: conf,
    })
}

pub fn compute_metrics<'a>(
    probs: ArrayView2<'a, f32>,
    label: &'a LabelMask,
    fov: Option<&'a Array2<bool>>,
    threshold: f64,
) -> Result<MetricsReport> {
    pooled_metrics(&[Scored { probs, label, fov }], threshold, fov.is_some())
}

/// Sensitivity restricted to the vessel pixels selected by `subset`.
pub fn subset_sensitivity(items: &[(ArrayView2<f32>, &Array2<bool>)], threshold: f64) -> Result<f64> {
    let (mut hit, mut total) = (0u64, 0u64);
    for (probs, subset) in items {
        if probs.dim() != subset.dim() {
            return Err(shape_err!("subset mask {:?} vs probabilities {:?}", subset.dim(), probs.dim()));
        }
        for (&p, &s) in probs.iter().zip(subset.iter()) {
            if s {
                total += 1;
                hit += u64::from(p as f64 >= threshold);
            }
        }
    }
    if total == 0 {
        return Err(Error::Degenerate("empty subset".into()));
    }
    Ok(hit as f64 / total as f64)
}

fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *v.last().expect("len >= window") != len - window {
        v.push(len - window);
    }
    v
}

/// Vessel probabilities for a whole image by overlapping-window inference;
/// overlaps are averaged.
pub fn infer_full_image(model: &Model, sample: &FundusSample, window: usize, stride: usize) -> Result<Array2<f32>> {
    let (h, w) = sample.dim();
    let q = model.spec.input_multiple();
    if window == 0 || !window.is_multiple_of(q) {
        return Err(Error::InvalidArgument(format!("window {window} is not a multiple of {q}")));
    }
    if h < window || w < window {
        return Err(shape_err!("image {}x{} is smaller than the {} window", h, w, window));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let mut sum = Array2::<f32>::zeros((h, w));
    let mut hits = Array2::<f32>::zeros((h, w));
    let plane = window * window;
    for &top in &window_starts(h, window, stride) {
        for &left in &window_starts(w, window, stride) {
            let crop = sample.image.slice(s![.., top..top + window, left..left + window]);
            let input = Tensor::from_vec(&[1, 3, window, window], crop.iter().copied().collect())?;
            let out = model.predict(&input)?;
            let z = out.y_main.data();
            for i in 0..plane {
                // two-class softmax, vessel channel
                let p = 1.0 / (1.0 + (z[i] - z[plane + i]).exp());
                let (y, x) = (top + i / window, left + i % window);
                sum[[y, x]] += p;
                hits[[y, x]] += 1.0;
            }
        }
    }
    Ok(sum / hits)
}

/// `a − b`, elementwise.
pub fn probability_difference_map(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<Array2<f32>> {
    if a.dim() != b.dim() {
        return Err(shape_err!("difference of {:?} and {:?}", a.dim(), b.dim()));
    }
    Ok(&a - &b)
}

pub fn save_difference_map(diff: ArrayView2<f32>, path: &Path) -> Result<()> {
    imageio::save_diverging(&diff, 1.0, path)
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub per_image: Vec<(String, MetricsReport)>,
    pub pooled: MetricsReport,
    pub probs: Vec<(String, Array2<f32>)>,
}

/// Inference and metrics over `samples` with the evaluation settings of `config`.
pub fn evaluate(model: &Model, samples: &[FundusSample], config: &Config) -> Result<EvalOutput> {
    let e = &config.eval;
    let mut probs = Vec::with_capacity(samples.len());
    for s in samples {
        probs.push((s.id.clone(), infer_full_image(model, s, e.window, e.stride)?));
    }
    let fov_used = e.fov_restricted && samples.iter().any(|s| s.fov.is_some());
    let tag = |mut r: MetricsReport| {
        r.dataset = config.data.dataset.to_string();
        r.config_hash = config.hash();
        r
    };
    let mut per_image = Vec::new();
    for (s, (_, p)) in samples.iter().zip(&probs) {
        let item = Scored { probs: p.view(), label: &s.label, fov: s.fov.as_ref() };
        match pooled_metrics(&[item], e.threshold, fov_used) {
            Ok(r) => per_image.push((s.id.clone(), tag(r))),
            Err(Error::Degenerate(msg)) => log::warn!("{}: {msg}", s.id),
            Err(err) => return Err(err),
        }
    }
    let items: Vec<Scored> = samples
        .iter()
        .zip(&probs)
        .map(|(s, (_, p))| Scored { probs: p.view(), label: &s.label, fov: s.fov.as_ref() })
        .collect();
    let mut pooled = tag(pooled_metrics(&items, e.threshold, fov_used)?);
    if e.per_image_auc && !per_image.is_empty() {
        pooled.auc = per_image.iter().map(|(_, r)| r.auc).sum::<f64>() / per_image.len() as f64;
    }
    Ok(EvalOutput { per_image, pooled, probs })
}

pub fn metrics_csv(out: &EvalOutput) -> String {
    let mut s = String::from("image,auc,acc,spe,sen,tp,tn,fp,fn,threshold,fov_restricted,dataset,config_hash\n");
    let rows = out.per_image.iter().map(|(id, r)| (id.as_str(), r)).chain([("pooled", &out.pooled)]);
    for (id, r) in rows {
        let c = r.confusion;
        let _ = writeln!(
            s,
            "{id},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{}",
            r.auc, r.acc, r.spe, r.sen, c.tp, c.tn, c.fp, c.fn_, r.threshold, r.fov_restricted, r.dataset, r.config_hash
        );
    }
    s
}

pub fn metrics_table(out: &EvalOutput) -> String {
    let mut s = format!("{:<16} {:>7} {:>7} {:>7} {:>7}\n", "image", "AUC", "Acc", "Spe", "Sen");
    let rows = out.per_image.iter().map(|(id, r)| (id.as_str(), r)).chain([("pooled", &out.pooled)]);
    for (id, r) in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            id,
            100.0 * r.auc,
            100.0 * r.acc,
            100.0 * r.spe,
            100.0 * r.sen
        );
    }
    s
}

/// Writes the metrics CSV and one probability PNG per image.
pub fn write_eval_outputs(out: &EvalOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("probs"))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(out))?;
    for (id, p) in &out.probs {
        imageio::save_probability(&p.view(), &dir.join("probs").join(format!("{id}.png")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub name: String,
    pub loss_mode: LossMode,
    pub lambda: Option<f64>,
    pub use_weight_map: bool,
    pub ilc_mode: IlcMode,
}

/// The eight configurations of the ablation table, in table order.
pub fn ablation_settings() -> Vec<AblationSetting> {
    let row = |name: &str, loss_mode, lambda: Option<f64>, use_weight_map, ilc_mode| AblationSetting {
        name: name.to_owned(),
        loss_mode,
        lambda,
        use_weight_map,
        ilc_mode,
    };
    use IlcMode::*;
    use LossMode::*;
    vec![
        row("lambda1", Static, Some(1.0), false, None),
        row("lambda1_ilc", Static, Some(1.0), false, Target),
        row("lambda0.1_wtmap_ilc", Static, Some(0.1), true, Target),
        row("lambda0.01_wtmap_ilc", Static, Some(0.01), true, Target),
        row("lambda0.001_wtmap_ilc", Static, Some(0.001), true, Target),
        row("uncert_wtmap_shared", Uncertainty, Option::None, true, AllShared),
        row("uncert_ilc", Uncertainty, Option::None, false, Target),
        row("uncert_wtmap_ilc", Uncertainty, Option::None, true, Target),
    ]
}

impl AblationSetting {
    pub fn apply(&self, base: &Config) -> Config {
        let mut c = base.clone();
        c.train.loss_mode = self.loss_mode;
        c.train.lambda = self.lambda;
        c.train.use_weight_map = self.use_weight_map;
        c.network.ilc_mode = self.ilc_mode;
        c
    }

    fn uncert_column(&self) -> String {
        match (self.loss_mode, self.lambda) {
            (LossMode::Uncertainty, _) => "uncertainty".into(),
            (LossMode::Static, Some(l)) => format!("lambda={l}"),
            (LossMode::Static, None) => "lambda=?".into(),
            (LossMode::MainOnly, _) => "main_only".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub result: std::result::Result<MetricsReport, String>,
}

/// Trains and evaluates every ablation configuration; a failing row is
/// recorded and the rest continue.
pub fn run_ablation(
    train: &[FundusSample],
    test: &[FundusSample],
    base: &Config,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for setting in ablation_settings() {
        let config = setting.apply(base);
        let dir = out_dir.join(&setting.name);
        log::info!("ablation row {}", setting.name);
        let result = training::fit(train, test, &config, &dir, false)
            .and_then(|run| evaluate(&run.model, test, &config))
            .map(|e| e.pooled)
            .map_err(|e| e.to_string());
        if let Err(msg) = &result {
            log::error!("ablation row {} failed: {msg}", setting.name);
        }
        rows.push(AblationRow { setting, result });
        fs::write(out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}

/// Percentages in the column order uncert, wt_map, ilcs, auc, acc, sp, se.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,uncert,wt_map,ilcs,auc,acc,sp,se,error\n");
    for r in rows {
        let st = &r.setting;
        let ilc = st.ilc_mode.as_str();
        match &r.result {
            Ok(m) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.2},{:.2},{:.2},{:.2},",
                    st.name,
                    st.uncert_column(),
                    st.use_weight_map,
                    ilc,
                    100.0 * m.auc,
                    100.0 * m.acc,
                    100.0 * m.spe,
                    100.0 * m.sen
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{},{},{},{},,,,,\"{}\"", st.name, st.uncert_column(), st.use_weight_map, ilc, e.replace('"', "'"));
            }
        }
    }
    s
}
