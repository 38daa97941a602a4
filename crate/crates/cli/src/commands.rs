use std::path::Path;

use anyhow::{bail, Result};
use hatlm::data::{generate_task, read_manifest, read_split, read_text, write_task, Manifest};
use hatlm::decoder::{beam_search_batch, rescore_components, BeamConfig, NBestList};
use hatlm::hat::{HatConfig, HatModel, Utterance};
use hatlm::lfm::{rescore_scalar, rescore_with_lfm, train_lfm, LfmConfig, LfmModel};
use hatlm::lm::{ExternalLm, LanguageModel, NGramLm, NeuralLm, NeuralLmConfig};
use hatlm::report::{top1_wer, weight_series, Report};
use hatlm::sweep::{run_sweep, SweepMode, SweepSpec};
use hatlm::train::{train_mle, train_mwer, Hooks, RunLog, TrainConfig, TrainOutcome};
use hatlm::util::stable_hash;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ElmKind, ExpConfig};
use crate::exp::{artifact_name, content_hash, Artifact, ExpDir};
use crate::{Cli, Command, MissingError, Overrides, UsageError};

const DEV_SETS: [&str; 2] = ["dev-common", "dev-rare"];
const TEST_SETS: [&str; 2] = ["test-common", "test-rare"];

pub fn run(cli: Cli) -> Result<()> {
    let cfg = ExpConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    let exp = ExpDir::open(&cli.exp_dir)?;
    let ctx = Ctx { cfg, exp };
    match cli.command {
        Command::GenData => ctx.gen_data(),
        Command::TrainMle { name, o } => ctx.train_mle(&name, &o),
        Command::TrainMwer {
            init,
            name,
            tie,
            from_sweep,
            o,
        } => ctx.train_mwer(&init, name, tie, from_sweep, &o),
        Command::TrainLfm { e2e, name, o } => ctx.train_lfm(&e2e, &name, &o),
        Command::Decode { model, split, name, o } => ctx.decode(&model, &split, name, &o),
        Command::Rescore { nbest, lfm, name, o } => ctx.rescore(&nbest, lfm.as_deref(), name, &o),
        Command::Sweep { model, mode, o } => ctx.sweep(&model, mode.as_deref(), &o),
        Command::Eval {
            model,
            lfm,
            rescore,
            no_lm,
            method,
            o,
        } => ctx.eval(&model, lfm.as_deref(), rescore, no_lm, method, &o),
        Command::Report => ctx.report(),
    }
}

struct Ctx {
    cfg: ExpConfig,
    exp: ExpDir,
}

fn check_beam(o: &Overrides) -> Result<Option<usize>> {
    match (o.beam, o.k) {
        (Some(b), Some(k)) if b != k => {
            bail!(UsageError(format!("--beam {b} conflicts with --k {k}: the N-best list is the final beam")))
        }
        (b, k) => Ok(b.or(k)),
    }
}

fn beam_overrides(mut b: BeamConfig, o: &Overrides) -> Result<BeamConfig> {
    if let Some(w) = check_beam(o)? {
        b.beam = w;
    }
    if let Some(l) = o.lambda {
        b.lambda = l;
    }
    if let Some(g) = o.gamma {
        b.gamma = g;
    }
    b.validate()?;
    Ok(b)
}

fn train_overrides(mut t: TrainConfig, o: &Overrides, tie: bool) -> Result<TrainConfig> {
    if let Some(w) = check_beam(o)? {
        t.beam = w;
    }
    if let Some(v) = o.lambda {
        t.lambda = v;
    }
    if let Some(v) = o.gamma {
        t.gamma = v;
    }
    if let Some(v) = o.mu {
        t.mu = v;
    }
    if let Some(v) = o.nu {
        t.nu = v;
    }
    if let Some(v) = o.theta {
        t.theta = v;
    }
    if let Some(v) = o.steps {
        t.steps = v;
    }
    if tie {
        t.tie_weights = true;
    }
    if t.tie_weights {
        if o.mu.is_some_and(|m| m != t.lambda) || o.nu.is_some_and(|n| n != t.gamma) {
            bail!(UsageError("--mu/--nu conflict with weight tying to (lambda, gamma)".into()));
        }
    }
    Ok(t.resolved()?)
}

/// File-name-safe form of a user-chosen label.
fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn wer_of(lists: &[NBestList]) -> Result<f64> {
    Ok(top1_wer(lists)?)
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn data_dir(&self) -> std::path::PathBuf {
        self.exp.data_dir(&hatlm::data::config_hash(&self.cfg.task), self.seed())
    }

    fn manifest(&self) -> Result<Manifest> {
        let dir = self.data_dir();
        if !dir.join("manifest.json").exists() {
            bail!(MissingError(format!(
                "no corpora for this task config and seed {} ({}); run gen-data first",
                self.seed(),
                dir.display()
            )));
        }
        Ok(read_manifest(&dir)?)
    }

    fn split(&self, name: &str) -> Result<Vec<Utterance>> {
        self.manifest()?;
        if !hatlm::data::SPLITS.contains(&name) {
            bail!(UsageError(format!(
                "unknown split `{name}`; expected one of {:?}",
                hatlm::data::SPLITS
            )));
        }
        Ok(read_split(&self.data_dir(), name)?)
    }

    fn dev_sets(&self) -> Result<Vec<(String, Vec<Utterance>)>> {
        DEV_SETS.iter().map(|s| Ok((s.to_string(), self.split(s)?))).collect()
    }

    fn elm(&self) -> Result<ExternalLm> {
        let a = self.exp.find("elm", "elm", self.seed())?;
        Ok(ExternalLm::load(&self.exp.path(&a.file))?)
    }

    fn hat(&self, name: &str) -> Result<(Artifact, HatModel)> {
        let a = self.exp.find("hat", name, self.seed())?;
        let m = HatModel::load(&self.exp.path(&a.file))?;
        Ok((a, m))
    }

    fn gen_data(&self) -> Result<()> {
        let c = &self.cfg;
        let dir = self.data_dir();
        let task_hash = hatlm::data::config_hash(&c.task);
        if dir.join("manifest.json").exists() {
            let m = read_manifest(&dir)?;
            if m.config_hash != task_hash {
                bail!(crate::ConflictError(format!(
                    "{} holds corpora for config {}",
                    dir.display(),
                    m.config_hash
                )));
            }
            println!("corpora already present ({})", m.config_hash);
        } else {
            let task = generate_task(&c.task)?;
            let m = write_task(&task, &dir)?;
            self.exp.register(&Artifact {
                kind: "data".into(),
                name: "task".into(),
                file: format!("{}/manifest.json", dir.file_name().and_then(|n| n.to_str()).unwrap_or_default()),
                config_hash: m.config_hash.clone(),
                seed: self.seed(),
                extra: json!({"files": m.files.len()}),
            })?;
            println!("wrote corpora to {} ({})", dir.display(), m.config_hash);
        }
        self.exp.write_new(
            &artifact_name("config", &c.hash(), self.seed(), "toml"),
            c.to_toml().as_bytes(),
        )?;

        let text: Vec<Vec<u32>> = read_text(&dir)?.into_iter().map(|r| r.words).collect();
        let e = &c.elm;
        let elm_hash = stable_hash(format!("{task_hash}|{}", serde_json::to_string(e)?).as_bytes());
        let file = artifact_name("elm", &elm_hash, self.seed(), "lm");
        if self.exp.find("elm", "elm", self.seed()).is_ok_and(|a| a.file == file) {
            return Ok(());
        }
        let lm = match e.kind {
            ElmKind::Ngram => ExternalLm::NGram(NGramLm::train(&text, c.task.vocab_size, e.order, e.smoothing, false, e.eos)?),
            ElmKind::Neural => {
                let nc = NeuralLmConfig {
                    steps: e.neural_steps,
                    seed: self.seed(),
                    ..NeuralLmConfig::new(c.task.vocab_size)
                };
                ExternalLm::Neural(NeuralLm::train(&text, nc)?)
            }
        };
        self.exp.produce(&file, |p| lm.save(p))?;
        self.exp.register(&Artifact {
            kind: "elm".into(),
            name: "elm".into(),
            file: file.clone(),
            config_hash: elm_hash,
            seed: self.seed(),
            extra: json!({"sentences": text.len()}),
        })?;
        println!("trained external LM -> {file}");
        Ok(())
    }

    fn save_run<M>(
        &self,
        kind: &str,
        name: &str,
        hash: &str,
        out: &TrainOutcome<M>,
        save: impl FnOnce(&M, &Path) -> hatlm::Result<()>,
        extra: serde_json::Value,
    ) -> Result<()> {
        let ckpt = artifact_name(name, hash, self.seed(), "ckpt");
        let log = artifact_name(name, hash, self.seed(), "log.jsonl");
        self.exp.produce(&log, |p| out.log.write(p))?;
        self.exp.produce(&ckpt, |p| save(&out.model, p))?;
        let mut extra = extra;
        extra["log"] = json!(log);
        extra["diverged"] = json!(out.diverged);
        self.exp.register(&Artifact {
            kind: kind.into(),
            name: name.into(),
            file: ckpt.clone(),
            config_hash: hash.into(),
            seed: self.seed(),
            extra,
        })?;
        let losses = out.log.losses();
        let tail = &losses[losses.len().saturating_sub(20)..];
        if !tail.is_empty() {
            println!(
                "{name}: {} steps, mean loss over last {} = {:.4} -> {ckpt}",
                losses.len(),
                tail.len(),
                tail.iter().sum::<f64>() / tail.len() as f64
            );
        }
        if let Some(step) = out.diverged {
            return Err(hatlm::Error::Diverged { step }.into());
        }
        Ok(())
    }

    fn train_mle(&self, name: &str, o: &Overrides) -> Result<()> {
        let tc = train_overrides(self.cfg.mle.clone(), o, false)?;
        let m = self.manifest()?;
        let train = self.split("train")?;
        let dev = self.dev_sets()?;
        let init = HatModel::new(HatConfig::new(m.acoustic_vocab, self.cfg.task.vocab_size), self.seed())?;
        let hooks = Hooks {
            dev: &dev,
            ..Hooks::default()
        };
        let out = train_mle(&tc, init, &train, &hooks)?;
        let hash = stable_hash(format!("{}|{}", tc.hash(), m.config_hash).as_bytes());
        self.save_run("hat", name, &hash, &out, |m, p| m.save(p, json!({"regime": "mle"})), json!({"regime": "mle"}))
    }

    fn train_mwer(&self, init: &str, name: Option<String>, tie: bool, from_sweep: bool, o: &Overrides) -> Result<()> {
        let mut base = self.cfg.mwer.clone();
        if from_sweep {
            if o.lambda.is_some() || o.gamma.is_some() {
                bail!(UsageError("--from-sweep conflicts with --lambda/--gamma".into()));
            }
            let s = self.exp.find("sweep-shallow-fusion", init, self.seed())?;
            base.lambda = s.extra["best_lambda"].as_f64().unwrap_or(0.0);
            base.gamma = s.extra["best_gamma"].as_f64().unwrap_or(0.0);
        }
        let tc = train_overrides(base, o, tie)?;
        let (ia, hat) = self.hat(init)?;
        let train = self.split("train")?;
        let dev = self.dev_sets()?;
        let uses_lm = tc.lambda > 0.0 || tc.gamma > 0.0 || tc.mu > 0.0 || tc.nu > 0.0;
        let elm = if uses_lm { Some(self.elm()?) } else { None };
        let name = name.unwrap_or_else(|| if uses_lm || tie || from_sweep { "mwer-lm".into() } else { "mwer".into() });
        let hooks = Hooks {
            dev: &dev,
            ..Hooks::default()
        };
        let out = train_mwer(&tc, hat, elm.as_ref().map(|e| e as &dyn LanguageModel), &train, &hooks)?;
        let hash = stable_hash(format!("{}|{}", tc.hash(), ia.file).as_bytes());
        let extra = json!({"regime": "mwer", "init": init, "lambda": tc.lambda, "gamma": tc.gamma, "mu": tc.mu, "nu": tc.nu});
        self.save_run("hat", &name, &hash, &out, |m, p| m.save(p, extra.clone()), extra.clone())
    }

    fn train_lfm(&self, e2e: &str, name: &str, o: &Overrides) -> Result<()> {
        let tc = train_overrides(self.cfg.lfm.clone(), o, false)?;
        let (ha, mut hat) = self.hat(e2e)?;
        hat.params.set_trainable(false);
        let elm = self.elm()?;
        let train = self.split("train")?;
        let dev = self.dev_sets()?;
        let s = &self.cfg.lfm_model;
        let lc = LfmConfig {
            dim: s.dim,
            heads: s.heads,
            layers: s.layers,
            ffn_dim: s.ffn_dim,
            nonnegative: s.nonnegative,
            ..LfmConfig::new(hat.vocab_size(), hat.config.enc_dim)
        };
        let init = LfmModel::new(lc, self.seed())?;
        let out = train_lfm(&tc, &hat, &elm, init, &train, &dev)?;
        let hash = stable_hash(format!("{}|{}|{}", tc.hash(), ha.file, serde_json::to_string(s)?).as_bytes());
        let extra = json!({"regime": "lfm", "e2e": e2e, "decodes": out.log.total_decodes()});
        self.save_run("lfm", name, &hash, &out, |m, p| m.save(p, extra.clone()), extra.clone())
    }

    /// Beam search over `utts` with exact full sums attached.
    fn decode_lists(&self, hat: &HatModel, elm: Option<&ExternalLm>, utts: &[Utterance], beam: &BeamConfig) -> Result<Vec<NBestList>> {
        let lists = beam_search_batch(utts, hat, elm.map(|e| e as &dyn LanguageModel), beam)?;
        let lists: hatlm::Result<Vec<NBestList>> = lists
            .par_iter()
            .zip(utts)
            .map(|(l, u)| if l.is_empty() { Ok(l.clone()) } else { rescore_components(l, hat, u) })
            .collect();
        Ok(lists?)
    }

    fn write_lists(&self, stem: &str, hash: &str, lists: &[NBestList]) -> Result<String> {
        let file = artifact_name(stem, hash, self.seed(), "jsonl");
        self.exp.produce(&file, |p| NBestList::write(p, lists))?;
        Ok(file)
    }

    fn decode(&self, model: &str, split: &str, name: Option<String>, o: &Overrides) -> Result<()> {
        let beam = beam_overrides(self.cfg.beam.clone(), o)?;
        let (ha, hat) = self.hat(model)?;
        let utts = self.split(split)?;
        let elm = self.elm()?;
        let lists = self.decode_lists(&hat, Some(&elm), &utts, &beam)?;
        let w = wer_of(&lists)?;
        let name = name.unwrap_or_else(|| format!("{model}-{split}"));
        let hash = stable_hash(format!("{}|{split}|{}", ha.file, serde_json::to_string(&beam)?).as_bytes());
        let file = self.write_lists(&format!("decode-{name}"), &hash, &lists)?;
        self.exp.register(&Artifact {
            kind: "decode".into(),
            name: name.clone(),
            file: file.clone(),
            config_hash: hash,
            seed: self.seed(),
            extra: json!({"model": model, "split": split, "lambda": beam.lambda, "gamma": beam.gamma, "wer": w}),
        })?;
        println!("{name}: WER {w:.2} on {split} -> {file}");
        Ok(())
    }

    fn rescore(&self, nbest: &str, lfm: Option<&str>, name: Option<String>, o: &Overrides) -> Result<()> {
        let d = self.exp.find("decode", nbest, self.seed())?;
        let lists = NBestList::read(&self.exp.path(&d.file))?;
        let (label, out, hash) = match lfm {
            Some(l) => {
                if o.mu.is_some() || o.nu.is_some() {
                    bail!(UsageError("--lfm conflicts with scalar --mu/--nu".into()));
                }
                let la = self.exp.find("lfm", l, self.seed())?;
                let model = LfmModel::load(&self.exp.path(&la.file))?;
                let split = d.extra["split"].as_str().unwrap_or_default().to_string();
                let (_, hat) = self.hat(d.extra["model"].as_str().unwrap_or_default())?;
                let utts = self.split(&split)?;
                let out: hatlm::Result<Vec<NBestList>> = utts
                    .par_iter()
                    .zip(&lists)
                    .map(|(u, nb)| rescore_with_lfm(u, nb, &hat, &model))
                    .collect();
                (format!("lfm:{l}"), out?, stable_hash(format!("{}|{}", d.file, la.file).as_bytes()))
            }
            None => {
                let (Some(mu), Some(nu)) = (o.mu, o.nu) else {
                    bail!(UsageError("scalar rescoring needs --mu and --nu (or --lfm)".into()));
                };
                let out: hatlm::Result<Vec<NBestList>> = lists.iter().map(|nb| rescore_scalar(nb, mu, nu)).collect();
                (format!("mu={mu},nu={nu}"), out?, stable_hash(format!("{}|{mu}|{nu}", d.file).as_bytes()))
            }
        };
        let w = wer_of(&out)?;
        let name = name.unwrap_or_else(|| format!("{nbest}+{label}"));
        let file = self.write_lists(&format!("rescore-{}", slug(&name)), &hash, &out)?;
        self.exp.register(&Artifact {
            kind: "rescore".into(),
            name: name.clone(),
            file: file.clone(),
            config_hash: hash,
            seed: self.seed(),
            extra: json!({"decode": nbest, "weights": label, "wer": w}),
        })?;
        println!("{name}: WER {w:.2} -> {file}");
        Ok(())
    }

    fn sweep_spec(&self, mode: Option<&str>, o: &Overrides) -> Result<SweepSpec> {
        let mode = match mode {
            None => self.cfg.sweep.mode,
            Some("shallow-fusion") => SweepMode::ShallowFusion,
            Some("rescoring") => SweepMode::Rescoring,
            Some(m) => bail!(UsageError(format!("unknown sweep mode `{m}`"))),
        };
        if o.lambda.is_some() || o.gamma.is_some() {
            bail!(UsageError("sweep takes its weights from the grid, not --lambda/--gamma".into()));
        }
        Ok(SweepSpec {
            lambda: self.cfg.sweep.lambda,
            gamma: self.cfg.sweep.gamma,
            mode,
            beam: beam_overrides(self.cfg.beam.clone(), o)?,
        })
    }

    fn sweep(&self, model: &str, mode: Option<&str>, o: &Overrides) -> Result<()> {
        let spec = self.sweep_spec(mode, o)?;
        let (ha, hat) = self.hat(model)?;
        let elm = self.elm()?;
        let dev = self.dev_sets()?;
        let r = run_sweep(&spec, &hat, &elm, [(&dev[0].0, &dev[0].1), (&dev[1].0, &dev[1].1)])?;
        let kind = match spec.mode {
            SweepMode::ShallowFusion => "sweep-shallow-fusion",
            SweepMode::Rescoring => "sweep-rescoring",
        };
        let hash = stable_hash(format!("{}|{}", ha.file, serde_json::to_string(&spec)?).as_bytes());
        let file = artifact_name(&format!("{kind}-{model}"), &hash, self.seed(), "jsonl");
        self.exp.produce(&file, |p| r.write(p))?;
        let s = &r.summary;
        self.exp.register(&Artifact {
            kind: kind.into(),
            name: model.into(),
            file: file.clone(),
            config_hash: hash,
            seed: self.seed(),
            extra: json!({"best_lambda": s.best_lambda, "best_gamma": s.best_gamma, "best_average": s.best_average, "evaluations": s.evaluations, "failed": s.failed}),
        })?;
        println!(
            "{model}: best (lambda, gamma) = ({}, {}) with average dev WER {:.2} over {} points ({} failed) -> {file}",
            s.best_lambda, s.best_gamma, s.best_average, s.evaluations, s.failed
        );
        Ok(())
    }

    fn swept_weights(&self, kind: &str, model: &str, o: &Overrides) -> Result<(f64, f64)> {
        match (o.lambda, o.gamma) {
            (Some(l), Some(g)) => Ok((l, g)),
            (None, None) => {
                let s = self.exp.find(kind, model, self.seed()).map_err(|_| {
                    MissingError(format!("no {kind} result for `{model}`; run sweep or pass --lambda and --gamma"))
                })?;
                Ok((s.extra["best_lambda"].as_f64().unwrap_or(0.0), s.extra["best_gamma"].as_f64().unwrap_or(0.0)))
            }
            _ => bail!(UsageError("pass both --lambda and --gamma or neither".into())),
        }
    }

    fn eval(&self, model: &str, lfm: Option<&str>, rescore: bool, no_lm: bool, method: Option<String>, o: &Overrides) -> Result<()> {
        let modes = usize::from(lfm.is_some()) + usize::from(rescore) + usize::from(no_lm);
        if modes > 1 {
            bail!(UsageError("--lfm, --rescore and --no-lm are mutually exclusive".into()));
        }
        let (ha, hat) = self.hat(model)?;
        let lfm_model = match lfm {
            Some(l) => {
                let a = self.exp.find("lfm", l, self.seed())?;
                Some((a.file.clone(), LfmModel::load(&self.exp.path(&a.file))?))
            }
            None => None,
        };
        let weights = if lfm.is_some() || no_lm {
            None
        } else if rescore {
            Some(self.swept_weights("sweep-rescoring", model, o)?)
        } else {
            Some(self.swept_weights("sweep-shallow-fusion", model, o)?)
        };
        let method = method.unwrap_or_else(|| match (lfm, rescore, no_lm) {
            (Some(l), _, _) => format!("{model}/{l}"),
            (_, true, _) => format!("{model}/rescoring"),
            (_, _, true) => format!("{model}/no-lm"),
            _ => format!("{model}/fusion"),
        });
        let elm = if no_lm { None } else { Some(self.elm()?) };
        for split in TEST_SETS {
            let utts = self.split(split)?;
            let base = beam_overrides(self.cfg.beam.clone(), &Overrides { lambda: None, gamma: None, ..o.clone() })?;
            let lists = match (&lfm_model, weights) {
                (Some((_, m)), _) => {
                    let free = self.decode_lists(&hat, elm.as_ref(), &utts, &base)?;
                    let out: hatlm::Result<Vec<_>> =
                        utts.par_iter().zip(&free).map(|(u, nb)| rescore_with_lfm(u, nb, &hat, m)).collect();
                    out?
                }
                (None, Some((l, g))) if rescore => {
                    let free = self.decode_lists(&hat, elm.as_ref(), &utts, &base)?;
                    let out: hatlm::Result<Vec<_>> = free.iter().map(|nb| rescore_scalar(nb, l, g)).collect();
                    out?
                }
                (None, Some((l, g))) => {
                    let b = BeamConfig {
                        lambda: l,
                        gamma: g,
                        ..base.clone()
                    };
                    self.decode_lists(&hat, elm.as_ref(), &utts, &b)?
                }
                (None, None) => self.decode_lists(&hat, None, &utts, &base)?,
            };
            let w = wer_of(&lists)?;
            let hash = stable_hash(
                format!(
                    "{}|{split}|{:?}|{weights:?}|{rescore}|{}",
                    ha.file,
                    lfm_model.as_ref().map(|m| &m.0),
                    serde_json::to_string(&base)?
                )
                .as_bytes(),
            );
            let file = self.write_lists(&format!("eval-{}-{split}", slug(&method)), &hash, &lists)?;
            self.exp.register(&Artifact {
                kind: "eval".into(),
                name: method.clone(),
                file: file.clone(),
                config_hash: hash,
                seed: self.seed(),
                extra: json!({"model": model, "split": split, "weights": weights, "wer": w}),
            })?;
            println!("{method}: WER {w:.2} on {split} -> {file}");
        }
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let arts = self.exp.artifacts()?;
        let mut r = Report::new(
            format!("Toy LM-aware training results (seed {})", self.seed()),
            TEST_SETS.iter().map(|s| s.to_string()).collect(),
        );
        for a in arts.iter().filter(|a| a.kind == "eval" && a.seed == self.seed()) {
            let lists = NBestList::read(&self.exp.path(&a.file))?;
            let split = a.extra["split"].as_str().unwrap_or_default();
            let weights = a.extra["weights"].as_array().and_then(|w| Some((w.first()?.as_f64()?, w.get(1)?.as_f64()?)));
            r.add(&a.name, weights, split, top1_wer(&lists)?)?;
        }
        if r.rows.is_empty() {
            bail!(MissingError("no evaluations to report; run eval first".into()));
        }
        if let Some(l) = arts.iter().rev().find(|a| a.kind == "lfm" && a.seed == self.seed()) {
            if let Some(log) = l.extra["log"].as_str() {
                r.weights = weight_series(&RunLog::read(&self.exp.path(log))?.records);
            }
        }
        let text = r.render();
        let file = format!(
            "report-{}-s{}-{}.md",
            self.cfg.hash(),
            self.seed(),
            &content_hash(text.as_bytes())[..8]
        );
        self.exp.write_new(&file, text.as_bytes())?;
        self.exp.register(&Artifact {
            kind: "report".into(),
            name: "report".into(),
            file: file.clone(),
            config_hash: self.cfg.hash(),
            seed: self.seed(),
            extra: json!({"rows": r.rows.len()}),
        })?;
        print!("{text}");
        eprintln!("report -> {}", self.exp.path(&file).display());
        Ok(())
    }
}
