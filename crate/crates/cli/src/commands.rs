use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use iris_style::backbone::{Backbone, WeightSource};
use iris_style::data::{generate_synthetic_corpus, load_gaze_dataset, load_recognition_dataset, Dataset, FeatureCache, Sample, Split};
use iris_style::features::{eye_features, FeatureKind};
use iris_style::gaze::{evaluate_gaze, train_gaze_estimator, AppearanceNet, GazeFeatures, ResNet50, SmallConvNet};
use iris_style::harness::{
    assign_donors, emit_report, privacy_heatmap, robustness_sweep, segmentation_impact, write_file, ExperimentResults, GroundTruthProvider,
    HeatmapCell, HeatmapSpec, Heads, MaskProvider, SweepRow, SweepSpec, ThresholdPredictor, VariationKind,
};
use iris_style::imaging::{extract_iris, reinsert, EyeImage, SegMask};
use iris_style::recognition::{evaluate, far_experiment, train_classifier, ClassifierHead, LabelledSet, RecognitionMetrics};
use iris_style::transfer::{stylize_eye, transfer};

use crate::config::{DataKind, RunConfig};
use crate::{Cli, Command, FeatureArg, GazeKindArg, LayoutArg, TransformArg, VariationArg};

const ROTATION_DEGREES: [f64; 11] = [0.0, 5.0, 10.0, 20.0, 30.0, 45.0, 60.0, 90.0, 120.0, 150.0, 180.0];
const PERSPECTIVE_DEGREES: [f64; 13] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    let ctx = Ctx { cfg };
    let name = command_name(&cli.command);
    ctx.write_manifest(&ctx.cfg.out_dir, name)?;
    match &cli.command {
        Command::Synth { users, samples, height, width, layout, out } => ctx.synth(*users, *samples, *height, *width, *layout, out.as_deref()),
        Command::Extract { feature, cache, dump_crops } => ctx.extract(*feature, cache.as_deref(), dump_crops.as_deref()),
        Command::Train { feature, cache, .. } => ctx.train(*feature, cache.as_deref()),
        Command::Eval { feature, heads } => ctx.eval(*feature, heads.as_deref()),
        Command::Sweep { variation, degrees, feature, heads } => ctx.sweep(*variation, degrees.clone(), *feature, heads.as_deref()),
        Command::Transfer { content, content_mask, style, style_mask, out, .. } => ctx.transfer(content, content_mask, style, style_mask, out),
        Command::Heatmap { betas, epoch_grid, heads } => ctx.heatmap(betas.clone(), epoch_grid.clone(), heads.as_deref()),
        Command::SegImpact { provider, .. } => ctx.seg_impact(provider.as_deref().unwrap_or("threshold")),
        Command::GazeEval { kind, transform, .. } => ctx.gaze_eval(*kind, *transform),
        Command::Far { feature, heads, .. } => ctx.far(*feature, heads.as_deref()),
        Command::Report { results } => ctx.report(results.as_deref()),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Extract { .. } => "extract",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
        Command::Transfer { .. } => "transfer",
        Command::Heatmap { .. } => "heatmap",
        Command::SegImpact { .. } => "seg-impact",
        Command::GazeEval { .. } => "gaze-eval",
        Command::Far { .. } => "far",
        Command::Report { .. } => "report",
    }
}

fn kinds(f: FeatureArg) -> Vec<FeatureKind> {
    match f {
        FeatureArg::Style => vec![FeatureKind::Style],
        FeatureArg::Cnn => vec![FeatureKind::Cnn],
        FeatureArg::All => FeatureKind::ALL.to_vec(),
    }
}

fn parse_kind(s: &str) -> Result<FeatureKind> {
    FeatureKind::ALL.into_iter().find(|k| k.label() == s).ok_or_else(|| anyhow!("unknown feature kind `{s}`"))
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn write_manifest(&self, dir: &Path, command: &str) -> Result<()> {
        let mut run = toml::Table::new();
        run.insert("command".into(), command.into());
        run.insert("argv".into(), toml::Value::Array(std::env::args().map(toml::Value::from).collect()));
        run.insert("seed".into(), toml::Value::Integer(self.cfg.seed as i64));
        run.insert("git_describe".into(), git_describe().into());
        run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        run.insert("weights".into(), self.weight_source().to_string().into());
        let mut doc = toml::Table::new();
        doc.insert("run".into(), toml::Value::Table(run));
        doc.insert("config".into(), toml::Value::try_from(&self.cfg)?);
        write_file(dir, "manifest.toml", &toml::to_string(&doc)?)?;
        Ok(())
    }

    fn weight_source(&self) -> WeightSource {
        self.cfg.weight_source().unwrap_or(WeightSource::Seeded(self.cfg.seed))
    }

    fn backbone(&self) -> Result<Backbone<f32>> {
        if self.cfg.weight_source().is_none() {
            warn!("no backbone weights configured (backbone.weights or ISL_WEIGHTS); using seeded random weights");
        }
        let source = self.weight_source();
        let net = source.load::<f32>().with_context(|| format!("loading backbone from {source}"))?;
        Ok(net.with_input_size(self.cfg.backbone.input_size)?)
    }

    fn transfer_backbone(&self, net: &Backbone<f32>) -> Result<Backbone<f32>> {
        Ok(net.clone().with_input_size(self.cfg.transfer_input_size())?)
    }

    fn dataset(&self) -> Result<Dataset> {
        let root = self.cfg.data.root.as_deref().ok_or_else(|| anyhow!("no dataset: pass --data or set data.root"))?;
        let manifest = match self.cfg.data.kind {
            DataKind::Recognition => load_recognition_dataset(root, self.cfg.data.test_fraction, self.cfg.seed),
            DataKind::Gaze => load_gaze_dataset(root),
        }
        .with_context(|| format!("loading dataset {}", root.display()))?;
        Ok(manifest.load()?)
    }

    fn cache_dir(&self, net: &Backbone<f32>, explicit: Option<&Path>) -> PathBuf {
        explicit.map(Path::to_path_buf).unwrap_or_else(|| self.out().join("cache").join(format!("s{}-{}", net.input_size(), &net.checksum()[..12])))
    }

    fn heads_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit.map(Path::to_path_buf).unwrap_or_else(|| self.out().join("heads"))
    }

    /// Features of every sample for every kind, `[kind][sample]`, reusing and
    /// extending the cache.
    fn features(&self, net: &Backbone<f32>, samples: &[&Sample], kinds: &[FeatureKind], cache_dir: &Path) -> Result<Vec<Vec<Vec<f32>>>> {
        let mut cache = FeatureCache::load(cache_dir)?;
        let size = net.input_size();
        let mut dirty = false;
        for s in samples {
            let missing: Vec<FeatureKind> = kinds.iter().copied().filter(|k| cache.get(&s.record_id, &k.cache_key(size), "none").is_none()).collect();
            if missing.is_empty() {
                continue;
            }
            let feats = eye_features(net, &s.image, s.mask()?, self.cfg.glint.threshold, &missing).with_context(|| format!("features of {}", s.record_id))?;
            for (k, f) in missing.iter().zip(feats) {
                cache.put(&s.record_id, &k.cache_key(size), "none", f)?;
            }
            dirty = true;
        }
        if dirty {
            cache.save(cache_dir)?;
        }
        Ok(kinds
            .iter()
            .map(|k| samples.iter().map(|s| cache.get(&s.record_id, &k.cache_key(size), "none").expect("just filled").to_vec()).collect())
            .collect())
    }

    fn load_heads(&self, kinds: &[FeatureKind], dir: Option<&Path>) -> Result<Heads> {
        let dir = self.heads_dir(dir);
        let mut heads = Heads::new();
        for k in kinds {
            let path = dir.join(format!("{k}.islh"));
            let head = ClassifierHead::load(&path).with_context(|| format!("loading head {} (run `isl train --feature {k}` first)", path.display()))?;
            heads.insert(*k, head);
        }
        Ok(heads)
    }

    fn synth(&self, users: usize, samples: usize, height: usize, width: usize, layout: LayoutArg, out: Option<&Path>) -> Result<()> {
        let root = out.unwrap_or(self.out());
        let corpus = generate_synthetic_corpus(users, samples, height, width, self.cfg.seed)?;
        match layout {
            LayoutArg::Recognition => corpus.write_recognition(root)?,
            LayoutArg::Gaze => corpus.write_gaze(root, self.cfg.data.test_fraction, self.cfg.seed)?,
        }
        if root != self.out() {
            self.write_manifest(root, "synth")?;
        }
        println!("wrote {} eyes of {} users to {}", corpus.samples.len(), users, root.display());
        Ok(())
    }

    fn extract(&self, feature: FeatureArg, cache: Option<&Path>, dump: Option<&Path>) -> Result<()> {
        let net = self.backbone()?;
        let data = self.dataset()?;
        let samples: Vec<&Sample> = data.samples.iter().collect();
        if let Some(dir) = dump {
            std::fs::create_dir_all(dir)?;
            for s in &samples {
                extract_iris(&s.image, s.mask()?, self.cfg.glint.threshold)?.save_png(&dir.join(format!("{}.png", s.record_id)))?;
            }
        }
        let dir = self.cache_dir(&net, cache);
        let kinds = kinds(feature);
        let feats = self.features(&net, &samples, &kinds, &dir)?;
        for (k, f) in kinds.iter().zip(&feats) {
            println!("{}: {} vectors of length {}", k.cache_key(net.input_size()), f.len(), f.first().map_or(0, Vec::len));
        }
        println!("cache: {}", dir.display());
        Ok(())
    }

    fn split_features(&self, net: &Backbone<f32>, data: &Dataset, kinds: &[FeatureKind], cache: Option<&Path>) -> Result<SplitFeatures> {
        let train: Vec<&Sample> = data.split(Split::Train).collect();
        let test: Vec<&Sample> = data.split(Split::Test).collect();
        if train.is_empty() || test.is_empty() {
            bail!("dataset needs both train and test samples");
        }
        let dir = self.cache_dir(net, cache);
        Ok(SplitFeatures {
            train: self.features(net, &train, kinds, &dir)?,
            test: self.features(net, &test, kinds, &dir)?,
            train_labels: train.iter().map(|s| s.label).collect(),
            test_labels: test.iter().map(|s| s.label).collect(),
        })
    }

    fn train(&self, feature: FeatureArg, cache: Option<&Path>) -> Result<()> {
        let net = self.backbone()?;
        let data = self.dataset()?;
        let kinds = kinds(feature);
        let f = self.split_features(&net, &data, &kinds, cache)?;
        let heads = self.heads_dir(None);
        let mut results = ExperimentResults::default();
        for (i, k) in kinds.iter().enumerate() {
            let train = LabelledSet::new(&f.train[i], &f.train_labels)?;
            let test = LabelledSet::new(&f.test[i], &f.test_labels)?;
            info!("training {k} head on {} samples", f.train_labels.len());
            let (head, history) = train_classifier(train, Some(test), &self.cfg.train_config())?;
            std::fs::create_dir_all(&heads)?;
            head.save(&heads.join(format!("{k}.islh")))?;
            let m = evaluate(&head, test)?;
            println!("{k}: test accuracy {:.4}, macro-F1 {:.4}, MCC {:.4}", m.accuracy, m.macro_f1, m.mcc);
            results.history = Some(history);
            let written = emit_report(&results, self.out())?;
            std::fs::rename(&written[0], self.out().join(format!("history_{k}.csv")))?;
        }
        Ok(())
    }

    fn eval(&self, feature: FeatureArg, heads: Option<&Path>) -> Result<()> {
        let net = self.backbone()?;
        let data = self.dataset()?;
        let kinds = kinds(feature);
        let heads = self.load_heads(&kinds, heads)?;
        let test: Vec<&Sample> = data.split(Split::Test).collect();
        let feats = self.features(&net, &test, &kinds, &self.cache_dir(&net, None))?;
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        let mut csv = String::from("feature_kind,accuracy,f1,mcc\n");
        for (k, f) in kinds.iter().zip(&feats) {
            let m: RecognitionMetrics = evaluate(&heads[k], LabelledSet::new(f, &labels)?)?;
            csv.push_str(&format!("{k},{:.6},{:.6},{:.6}\n", m.accuracy, m.macro_f1, m.mcc));
            println!("{k}: accuracy {:.4}, macro-F1 {:.4}, MCC {:.4}", m.accuracy, m.macro_f1, m.mcc);
        }
        write_file(self.out(), "eval.csv", &csv)?;
        Ok(())
    }

    fn sweep(&self, variation: VariationArg, degrees: Option<Vec<f64>>, feature: FeatureArg, heads: Option<&Path>) -> Result<()> {
        let net = self.backbone()?;
        let data = self.dataset()?;
        let kinds = kinds(feature);
        let heads = self.load_heads(&kinds, heads)?;
        let variation = match variation {
            VariationArg::Rotation => VariationKind::Rotation,
            VariationArg::Perspective => VariationKind::Perspective,
        };
        let degrees = degrees.unwrap_or_else(|| match variation {
            VariationKind::Rotation => ROTATION_DEGREES.to_vec(),
            VariationKind::Perspective => PERSPECTIVE_DEGREES.to_vec(),
        });
        let spec = SweepSpec { variation, degrees, kinds, seed: self.cfg.seed };
        let test: Vec<&Sample> = data.split(Split::Test).collect();
        let rows = robustness_sweep(&net, &spec, &heads, &test, self.cfg.glint.threshold)?;
        for r in &rows {
            println!("{} {:>7} {:<5} accuracy {:.4}", variation.name(), r.degree, r.kind, r.metrics.accuracy);
        }
        emit_report(&ExperimentResults { sweeps: vec![(variation, rows)], ..Default::default() }, self.out())?;
        Ok(())
    }

    fn transfer(&self, content: &Path, content_mask: &Path, style: &Path, style_mask: &Path, out: &Path) -> Result<()> {
        let net = self.backbone()?;
        let tnet = self.transfer_backbone(&net)?;
        let image = EyeImage::load_png(content, "content", "content")?;
        let mask = SegMask::load(content_mask)?;
        let donor = EyeImage::load_png(style, "style", "style")?;
        let donor_mask = SegMask::load(style_mask)?;
        let thr = self.cfg.glint.threshold;
        let c = extract_iris(&image, &mask, thr)?;
        let s = extract_iris(&donor, &donor_mask, thr)?;
        let result = transfer(&tnet, &c, &s, &self.cfg.transfer_config())?;
        let stylized = reinsert(&image, &result.stylized, &mask)?;
        stylized.save_png(out)?;
        let mut csv = String::from("epoch,total,content,style\n");
        for (e, t) in std::iter::once(&result.initial).chain(&result.trace).enumerate() {
            csv.push_str(&format!("{e},{:.6},{:.6},{:.6}\n", t.total, t.content, t.style));
        }
        let trace = out.with_extension("csv");
        std::fs::write(&trace, csv).with_context(|| format!("writing {}", trace.display()))?;
        let f = result.final_terms();
        println!("stylized image: {} (loss {:.6} -> {:.6}); trace: {}", out.display(), result.initial.total, f.total, trace.display());
        Ok(())
    }

    fn heatmap(&self, betas: Option<Vec<f64>>, epochs: Option<Vec<usize>>, heads: Option<&Path>) -> Result<()> {
        let net = self.backbone()?;
        let tnet = self.transfer_backbone(&net)?;
        let data = self.dataset()?;
        let heads = self.load_heads(&FeatureKind::ALL, heads)?;
        let d = HeatmapSpec::default();
        let spec = HeatmapSpec { betas: betas.unwrap_or(d.betas), epoch_counts: epochs.unwrap_or(d.epoch_counts), alpha: 1.0 };
        let test: Vec<&Sample> = data.split(Split::Test).collect();
        let cells = privacy_heatmap(&net, &tnet, &spec, &self.cfg.transfer_config(), &heads, &test, self.cfg.glint.threshold, self.cfg.seed)?;
        println!("{} cells", cells.len());
        emit_report(&ExperimentResults { heatmap: Some(cells), ..Default::default() }, self.out())?;
        Ok(())
    }

    fn provider(name: &str) -> Result<Box<dyn MaskProvider + Send + Sync>> {
        match name {
            "threshold" => Ok(Box::new(ThresholdPredictor::default())),
            "ground-truth" => Ok(Box::new(GroundTruthProvider)),
            other => bail!(
                "segmentation provider `{other}` is not available; use `threshold` (intensity stand-in) or `ground-truth` (annotated masks)"
            ),
        }
    }

    fn seg_impact(&self, provider: &str) -> Result<()> {
        let provider = Self::provider(provider)?;
        let net = self.backbone()?;
        let tnet = self.transfer_backbone(&net)?;
        let data = self.dataset()?;
        let test: Vec<&Sample> = data.split(Split::Test).collect();
        let rows = segmentation_impact(&tnet, &test, provider.as_ref(), &self.cfg.transfer_config(), self.cfg.glint.threshold, self.cfg.seed)?;
        for r in &rows {
            println!("{} class {} IoU {:.4}", r.phase.name(), r.class_id, r.iou);
        }
        emit_report(&ExperimentResults { iou: Some(rows), ..Default::default() }, self.out())?;
        Ok(())
    }

    fn gaze_eval(&self, kind: GazeKindArg, transform: TransformArg) -> Result<()> {
        let data = self.dataset()?;
        let train: Vec<&Sample> = data.samples.iter().filter(|s| s.split != Split::Test).collect();
        let test: Vec<&Sample> = data.split(Split::Test).collect();
        if train.is_empty() || test.is_empty() {
            bail!("gaze evaluation needs train and test samples");
        }
        let features = match kind {
            GazeKindArg::Model => GazeFeatures::Landmarks(Self::provider(&self.cfg.gaze.provider)?),
            GazeKindArg::Appearance => GazeFeatures::Appearance(match &self.cfg.gaze.appearance_weights {
                Some(p) => AppearanceNet::ResNet50(Box::new(ResNet50::load(p, 224)?)),
                None => AppearanceNet::Small(SmallConvNet::seeded(self.cfg.seed, self.cfg.gaze.appearance_input_size)),
            }),
        };
        let (estimator, _) = train_gaze_estimator(features, &train, &self.cfg.gaze_config())?;
        let before = estimator.checksum();
        let eval = match transform {
            TransformArg::None => evaluate_gaze(&estimator, &test, None)?,
            TransformArg::Stylize => {
                let net = self.backbone()?;
                let tnet = self.transfer_backbone(&net)?;
                let donors = assign_donors(&test, self.cfg.seed)?;
                let by_id: BTreeMap<&str, usize> = test.iter().enumerate().map(|(i, s)| (s.record_id.as_str(), donors[i])).collect();
                let cfg = self.cfg.transfer_config();
                let thr = self.cfg.glint.threshold;
                let stylize = |s: &Sample| -> std::result::Result<EyeImage, String> {
                    let d = test[by_id[s.record_id.as_str()]];
                    let (m, dm) = (s.mask().map_err(|e| e.to_string())?, d.mask().map_err(|e| e.to_string())?);
                    stylize_eye(&tnet, &s.image, m, &d.image, dm, thr, &cfg).map_err(|e| e.to_string())
                };
                evaluate_gaze(&estimator, &test, Some(&stylize))?
            }
        };
        debug_assert_eq!(before, estimator.checksum());
        let label = match kind {
            GazeKindArg::Model => "model",
            GazeKindArg::Appearance => "appearance",
        };
        let tname = match transform {
            TransformArg::None => "none",
            TransformArg::Stylize => "stylize",
        };
        let mut csv = String::from("record_id,error_deg\n");
        for (id, e) in &eval.errors {
            csv.push_str(&format!("{id},{e:.6}\n"));
        }
        let path = write_file(self.out(), &format!("gaze_{label}_{tname}.csv"), &csv)?;
        println!("{label} estimator, transform {tname}: mean error {:.4} deg over {} images ({})", eval.mean_error, eval.errors.len(), path.display());
        Ok(())
    }

    fn far(&self, feature: FeatureArg, heads: Option<&Path>) -> Result<()> {
        let net = self.backbone()?;
        let tnet = self.transfer_backbone(&net)?;
        let data = self.dataset()?;
        let test: Vec<&Sample> = data.split(Split::Test).collect();
        let mut csv = String::from("phase,feature_kind,attempts,acceptances,far\n");
        let cfg = self.cfg.transfer_config();
        for k in kinds(feature) {
            let heads = self.load_heads(&[k], heads)?;
            for (phase, c) in [("pre", None), ("post", Some(&cfg))] {
                let r = far_experiment(&net, &tnet, &heads[&k], k, &test, c, self.cfg.glint.threshold, self.cfg.seed)?;
                println!("{phase} {k}: FAR {:.4} ({} of {})", r.far, r.acceptances, r.attempts);
                csv.push_str(&format!("{phase},{k},{},{},{:.6}\n", r.attempts, r.acceptances, r.far));
            }
        }
        write_file(self.out(), "far.csv", &csv)?;
        Ok(())
    }

    fn report(&self, results: Option<&Path>) -> Result<()> {
        let dir = results.unwrap_or(self.out());
        let mut out = ExperimentResults::default();
        for (variation, name) in [(VariationKind::Rotation, "sweep_rotation.csv"), (VariationKind::Perspective, "sweep_perspective.csv")] {
            let path = dir.join(name);
            if path.exists() {
                out.sweeps.push((variation, read_sweep(&path)?));
            }
        }
        let heat = dir.join("heatmap.csv");
        if heat.exists() {
            out.heatmap = Some(read_heatmap(&heat)?);
        }
        if out.sweeps.is_empty() && out.heatmap.is_none() {
            bail!("no sweep_*.csv or heatmap.csv in {}", dir.display());
        }
        for p in emit_report(&out, self.out())? {
            println!("{}", p.display());
        }
        Ok(())
    }
}

struct SplitFeatures {
    train: Vec<Vec<Vec<f32>>>,
    test: Vec<Vec<Vec<f32>>>,
    train_labels: Vec<usize>,
    test_labels: Vec<usize>,
}

fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let r = rec?;
        let num = |i: usize| -> Result<f64> { Ok(r.get(i).ok_or_else(|| anyhow!("short row in {}", path.display()))?.parse()?) };
        rows.push(SweepRow {
            degree: num(0)?,
            kind: parse_kind(r.get(1).unwrap_or_default())?,
            metrics: RecognitionMetrics { accuracy: num(2)?, macro_f1: num(3)?, mcc: num(4)? },
        });
    }
    Ok(rows)
}

fn read_heatmap(path: &Path) -> Result<Vec<HeatmapCell>> {
    let mut cells = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let r = rec?;
        let field = |i: usize| r.get(i).ok_or_else(|| anyhow!("short row in {}", path.display()));
        cells.push(HeatmapCell { beta: field(0)?.parse()?, epochs: field(1)?.parse()?, kind: parse_kind(field(2)?)?, accuracy: field(3)?.parse()? });
    }
    Ok(cells)
}
