use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use gdc_core::estimators::exact_kl;
use gdc_core::metrics::zipf_table;
use gdc_core::{
    build_ebm, build_pointwise, project, resolve_constraints, tokenize_corpus, train, train_baseline, ConstraintSet,
    ConstraintSpec, Constraints, Ebm, EbmMode, Evaluator, Exact, ExactDistribution, FitReport, MetricsRecord, Model,
    Sequence, Universe,
};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};

/// Loaded experiment: validated config plus the base model and constraints.
pub struct Run {
    pub config: ExperimentConfig,
    pub config_dir: PathBuf,
    pub output: PathBuf,
    pub base: Model,
    pub constraints: Constraints,
    artifacts: BTreeMap<String, PathBuf>,
    started: Instant,
}

impl Run {
    pub fn open(config: ExperimentConfig, config_path: &Path, output: PathBuf) -> Result<Self> {
        let config_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = load_base(&config, &config_dir)?;
        let constraints = resolve(&config, &base)?;
        Ok(Self { config, config_dir, output, base, constraints, artifacts: BTreeMap::new(), started: Instant::now() })
    }

    fn require_constraints(&self) -> Result<()> {
        if self.constraints.is_empty() {
            return Err(ConfigError::new("constraints", "at least one constraint is required").into());
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn write(&mut self, key: &str, name: &str, contents: &[u8]) -> Result<()> {
        fs::create_dir_all(&self.output).with_context(|| format!("creating {}", self.output.display()))?;
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.insert(key.to_string(), path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, key: &str, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(key, name, text.as_bytes())
    }

    fn write_csv(&mut self, key: &str, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write(key, name, &bytes)
    }

    fn write_manifest(&mut self, command: &str) -> Result<()> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            artifacts: self.artifacts.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::create_dir_all(&self.output)?;
        fs::write(self.path("manifest.json"), text)?;
        Ok(())
    }

    fn fit(&mut self) -> Result<Ebm<f64>> {
        self.require_constraints()?;
        let (report, ebm) = build_ebm(&self.base, &self.constraints, &self.config.fit_config())?;
        let doc = EbmReport::new(&report, &self.constraints, self.config.fit.samples);
        self.write_json("ebm_report", "ebm_report.json", &doc)?;
        self.write("base_model", "base_model.json", self.base.to_json()?.as_bytes())?;
        Ok(ebm)
    }

    fn write_samples(&mut self, samples: &[Sequence]) -> Result<()> {
        let vocab = self.base.vocab().clone();
        let mut text = String::new();
        for x in samples {
            text.push_str(&x.display(&vocab).to_string());
            text.push('\n');
        }
        self.write("samples", "samples.txt", text.as_bytes())?;
        let rows: Vec<Vec<String>> = zipf_table(samples, &vocab)
            .map(|t| t.into_iter().map(|r| vec![r.rank.to_string(), r.token, r.frequency.to_string()]).collect())
            .unwrap_or_default();
        self.write_csv("zipf", "zipf.csv", &["rank".into(), "token".into(), "frequency".into()], &rows)
    }

    fn evaluator<'a>(&self, ebm: &'a Ebm<f64>, seed: u64) -> Result<Evaluator<'a, f64>> {
        let e = &self.config.eval;
        Ok(Evaluator::new(ebm, e.sample_size, seed, e.exact_oracle)?)
    }

    fn metrics_rows(history: &[MetricsRecord<f64>]) -> Vec<Vec<String>> {
        history.iter().map(MetricsRecord::csv_row).collect()
    }

    fn metrics_header(&self) -> Vec<String> {
        MetricsRecord::<f64>::csv_header(&self.constraints.ids(), self.config.eval.exact_oracle)
    }
}

fn load_base(config: &ExperimentConfig, dir: &Path) -> Result<Model> {
    let b = &config.base_model;
    if let Some(corpus) = &b.corpus {
        let path = dir.join(corpus);
        let text = fs::read_to_string(&path)
            .map_err(|e| ConfigError::new("base_model.corpus", format!("cannot read {}: {e}", path.display())))?;
        let lmax = config.space.lmax.expect("validated");
        let corpus = tokenize_corpus(&text, lmax).with_context(|| format!("tokenizing {}", path.display()))?;
        let order = b.order.unwrap_or(2);
        if order > lmax + 1 {
            return Err(
                ConfigError::new("base_model.order", format!("must be in 1..={} for lmax {lmax}", lmax + 1)).into()
            );
        }
        return Ok(Model::mle_fit(&corpus.space, &corpus.sequences, order, b.smoothing.unwrap_or(0.1))?);
    }
    let path = dir.join(b.model.as_ref().expect("validated"));
    let text = fs::read_to_string(&path)
        .map_err(|e| ConfigError::new("base_model.model", format!("cannot read {}: {e}", path.display())))?;
    let model = Model::from_json(&text).with_context(|| format!("loading {}", path.display()))?;
    if let Some(lmax) = config.space.lmax {
        if lmax != model.space().lmax() {
            return Err(ConfigError::new(
                "space.lmax",
                format!("is {lmax} but the model file uses {}", model.space().lmax()),
            )
            .into());
        }
    }
    Ok(model)
}

fn resolve(config: &ExperimentConfig, base: &Model) -> Result<Constraints> {
    for (i, c) in config.constraints.iter().enumerate() {
        c.resolve::<f64>(base.vocab()).map_err(|e| ConfigError::new(format!("constraints[{i}]"), e.to_string()))?;
    }
    Ok(resolve_constraints(&config.constraints, base.vocab())?)
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: String,
    config: ExperimentConfig,
    artifacts: BTreeMap<String, PathBuf>,
    wall_clock_seconds: f64,
}

#[derive(Debug, Serialize)]
struct ConstraintReport {
    id: String,
    target: f64,
    pointwise: bool,
    /// Absent in pointwise-product mode.
    lambda: Option<f64>,
    achieved_moment: f64,
}

#[derive(Debug, Serialize)]
struct EbmReport {
    mode: EbmMode,
    note: Option<String>,
    constraints: Vec<ConstraintReport>,
    objective: f64,
    steps_used: usize,
    converged: bool,
    fit_samples: usize,
}

impl EbmReport {
    fn new(report: &FitReport<f64>, constraints: &Constraints, samples: usize) -> Self {
        let product = report.mode == EbmMode::Pointwise;
        let specs = constraints.constraints();
        Self {
            mode: report.mode,
            note: product
                .then(|| "all constraints are pointwise: P(x) = a(x) * prod b_i(x), no lambda fitted".to_string()),
            constraints: (0..report.ids.len())
                .map(|i| ConstraintReport {
                    id: report.ids[i].clone(),
                    target: report.targets[i],
                    pointwise: specs[i].pointwise,
                    lambda: (!product).then(|| report.lambda[i]),
                    achieved_moment: report.achieved_moments[i],
                })
                .collect(),
            objective: report.objective,
            steps_used: if product { 0 } else { report.steps_used },
            converged: report.converged,
            fit_samples: if product { 0 } else { samples },
        }
    }
}

pub fn run_fit(run: &mut Run) -> Result<()> {
    run.fit()?;
    run.write_manifest("fit")?;
    println!("wrote {}", run.path("ebm_report.json").display());
    Ok(())
}

pub fn run_train(run: &mut Run) -> Result<()> {
    let ebm = run.fit()?;
    let seed = run.config.seed;
    let evaluator = run.evaluator(&ebm, seed)?;
    let (policy, history, iterations, extra) = match run.config.baseline_config() {
        None => {
            let config = run.config.dpg_config(None, seed);
            let out = train(&run.base, &ebm, &config, Some(&evaluator))?;
            (out.policy, out.history, config.iterations, None)
        }
        Some(config) => {
            let out = train_baseline(&run.base, &ebm, &config, Some(&evaluator))?;
            let beta: Vec<Vec<String>> =
                out.beta_trace.iter().enumerate().map(|(i, b)| vec![(i + 1).to_string(), b.to_string()]).collect();
            (out.outcome.policy, out.outcome.history, config.iterations, Some((beta, out.acceptance)))
        }
    };
    let header = run.metrics_header();
    run.write_csv("metrics", "metrics.csv", &header, &Run::metrics_rows(&history))?;
    run.write("policy", "policy.json", policy.to_json()?.as_bytes())?;
    let samples = evaluator.samples(&policy, iterations);
    run.write_samples(&samples)?;
    if let Some((beta, acceptance)) = extra {
        if !beta.is_empty() {
            run.write_csv("beta_trace", "beta_trace.csv", &["iteration".into(), "beta".into()], &beta)?;
        }
        if let Some(stats) = acceptance {
            run.write_json("acceptance", "acceptance.json", &stats)?;
        }
    }
    run.write_manifest("train")?;
    if let Some(last) = history.last() {
        println!(
            "{}: step {} samples {} kl_p_pi {:.4} kl_pi_a {:.4}",
            run.config.trainer.method.name(),
            last.step,
            last.samples,
            last.kl_p_pi.value,
            last.kl_pi_a.value
        );
    }
    Ok(())
}

pub fn run_ablation(run: &mut Run) -> Result<()> {
    if run.config.baseline_config().is_some() {
        return Err(ConfigError::new(
            "trainer.method",
            "ablation compares gdc adaptivity variants; use method = \"gdc\"",
        )
        .into());
    }
    let ebm = run.fit()?;
    let ab = run.config.ablation.clone();
    let exact = run.config.eval.exact_oracle;
    let mut header = vec!["variant".to_string(), "seed".to_string()];
    header.extend(run.metrics_header());
    header.push("threshold".into());
    header.push("below_threshold".into());
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &variant in &ab.variants {
        for &seed in &ab.seeds {
            let config = run.config.dpg_config(Some(variant), seed);
            let evaluator = run.evaluator(&ebm, seed)?;
            let out = train(&run.base, &ebm, &config, Some(&evaluator))?;
            let mut reached = None;
            for rec in &out.history {
                let kl = match &rec.exact {
                    Some(e) if exact => e.kl_p_pi,
                    _ => rec.kl_p_pi.value,
                };
                let below = kl < ab.threshold;
                if below && reached.is_none() {
                    reached = Some(rec.samples);
                }
                let mut row = vec![variant.name().to_string(), seed.to_string()];
                row.extend(rec.csv_row());
                row.push(ab.threshold.to_string());
                row.push(below.to_string());
                rows.push(row);
            }
            summary.push(vec![
                variant.name().to_string(),
                seed.to_string(),
                ab.threshold.to_string(),
                reached.map(|s| s.to_string()).unwrap_or_default(),
                out.proposal_updates.to_string(),
            ]);
        }
    }
    run.write_csv("ablation", "ablation.csv", &header, &rows)?;
    let summary_header: Vec<String> =
        ["variant", "seed", "threshold", "samples_to_threshold", "proposal_updates"].map(String::from).to_vec();
    run.write_csv("ablation_summary", "ablation_summary.csv", &summary_header, &summary)?;
    run.write_manifest("ablation")?;
    for row in &summary {
        let reached = if row[3].is_empty() { "not reached" } else { row[3].as_str() };
        println!("{} seed {}: samples to threshold {}", row[0], row[1], reached);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleReport {
    universe_size: usize,
    source: String,
    ids: Vec<String>,
    targets: Vec<f64>,
    /// Natural parameters; null entries are met by restricting the support.
    lambda: Vec<Option<f64>>,
    z: f64,
    moments: Vec<f64>,
    kl_p_a: f64,
    entropy_p: f64,
    /// `KL(c,a) - KL(c,p) - KL(p,a)` for `c`, the projection of the uniform
    /// distribution onto the moments of `p`. Null when a binary moment of `p`
    /// is zero.
    pythagorean_residual: Option<f64>,
}

const BOUNDARY_EPS: f64 = 1e-9;

fn pythagorean_residual(
    universe: &Universe,
    constraints: &Constraints,
    moments: &[f64],
    a: &Exact,
    p: &Exact,
    kl_p_a: f64,
) -> Result<Option<f64>> {
    let mut specs = Vec::with_capacity(moments.len());
    for (c, &m) in constraints.constraints().iter().zip(moments) {
        let binary = c.feature.is_binary();
        // enumeration leaves boundary moments a few ulps off 0 or 1
        if binary && m < BOUNDARY_EPS {
            return Ok(None);
        }
        let spec = if binary && m > 1.0 - BOUNDARY_EPS {
            ConstraintSpec::pointwise(c.feature.clone())?
        } else {
            ConstraintSpec::new(c.feature.clone(), m, false)?
        };
        specs.push(spec);
    }
    let own = ConstraintSet::new(specs)?;
    let uniform = ExactDistribution::from_weights(universe.space(), vec![1.0; universe.len()])?;
    let c = project(&uniform, universe, &own)?.dist;
    Ok(Some(exact_kl(c.probs(), a.probs())? - exact_kl(c.probs(), p.probs())? - kl_p_a))
}

pub fn run_oracle(run: &mut Run) -> Result<()> {
    run.require_constraints()?;
    let universe = Universe::new(run.base.space())?;
    let a = ExactDistribution::of_model(&run.base, &universe);
    let constraints = &run.constraints;
    let clamp = run.config.fit.lambda_clamp;
    let (source, p, lambda, z): (&str, Exact, Vec<Option<f64>>, f64) = match &run.config.oracle.lambda {
        Some(l) => {
            if l.len() != constraints.len() {
                let msg = format!("has {} entries for {} constraints", l.len(), constraints.len());
                return Err(ConfigError::new("oracle.lambda", msg).into());
            }
            let ebm = Ebm::exponential(run.base.clone(), constraints.clone(), l.clone(), clamp)?;
            let (z, p) = ebm.exact_normalize(&universe)?;
            ("explicit lambda", p, ebm.lambda().iter().map(|&v| Some(v)).collect(), z)
        }
        None if constraints.all_pointwise() => {
            let ebm = build_pointwise(run.base.clone(), constraints.clone())?;
            let (z, p) = ebm.exact_normalize(&universe)?;
            ("pointwise product", p, vec![None; constraints.len()], z)
        }
        None => {
            let proj = project(&a, &universe, constraints)?;
            let lambda: Vec<Option<f64>> = proj.lambda.iter().map(|&v| v.is_finite().then_some(v)).collect();
            let moments = proj.dist.moments(&universe, constraints);
            let kl = exact_kl(proj.dist.probs(), a.probs())?;
            // log Z = λ·E_p[φ] - KL(p, a), finite parameters only.
            let log_z = lambda.iter().zip(&moments).filter_map(|(l, m)| l.map(|l| l * m)).sum::<f64>() - kl;
            ("exact projection", proj.dist, lambda, log_z.exp())
        }
    };
    let moments = p.moments(&universe, constraints);
    let kl_p_a = exact_kl(p.probs(), a.probs())?;
    let residual = pythagorean_residual(&universe, constraints, &moments, &a, &p, kl_p_a)?;
    let report = OracleReport {
        universe_size: universe.len(),
        source: source.to_string(),
        ids: constraints.ids().into_iter().map(String::from).collect(),
        targets: constraints.targets(),
        lambda,
        z,
        moments,
        kl_p_a,
        entropy_p: p.entropy(),
        pythagorean_residual: residual,
    };
    run.write_json("oracle", "oracle.json", &report)?;
    run.write_manifest("oracle")?;
    match report.pythagorean_residual {
        Some(r) => println!("Z {:.6e} KL(p,a) {:.6} residual {r:.2e}", report.z, report.kl_p_a),
        None => println!("Z {:.6e} KL(p,a) {:.6}", report.z, report.kl_p_a),
    }
    Ok(())
}

pub fn run_eval(run: &mut Run) -> Result<()> {
    let model_path = match &run.config.eval.model {
        Some(m) => run.config_dir.join(m),
        None => run.path("policy.json"),
    };
    let text = fs::read_to_string(&model_path)
        .map_err(|e| ConfigError::new("eval.model", format!("cannot read {}: {e}", model_path.display())))?;
    let policy = Model::from_json(&text).with_context(|| format!("loading {}", model_path.display()))?;
    if policy.space() != run.base.space() {
        return Err(ConfigError::new("eval.model", "policy vocabulary or lmax differs from the base model").into());
    }
    let ebm = run.fit()?;
    let evaluator = run.evaluator(&ebm, run.config.seed)?;
    let record = evaluator.evaluate("eval", 0, 0, &policy, 0.0)?;
    let header = run.metrics_header();
    run.write_csv("metrics", "eval_metrics.csv", &header, &[record.csv_row()])?;
    let samples = evaluator.samples(&policy, 0);
    run.write_samples(&samples)?;
    run.write_manifest("eval")?;
    println!("kl_p_pi {:.4} kl_pi_a {:.4}", record.kl_p_pi.value, record.kl_pi_a.value);
    Ok(())
}
