use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use favae::data_io::{
    generate_synthetic, load_checkpoint, load_manifest, read_matrix, save_checkpoint,
    write_dataset, write_matrix, Checkpoint, MultiViewData, SynthConfig,
};
use favae::generation::{
    cross_generate, decode_codes, encode_view, generate_from_z, generate_mean_from_z,
    interpolate_global, interpolate_private, lambda_grid, latent_relevance, posterior_z_given,
    Generated, RelevanceMode,
};
use favae::model::ViewSpec;
use favae::neural::VaeNet;
use favae::rng::stream;
use favae::trainer::{train as train_model, TrainTrace};
use favae::{DMatrix, DVector, FaVae, ViewKind};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::config::{config_text, echo, from_table, read_table, to_toml, CliConfig, Resolved};
use crate::error::{CliError, CliResult};
use crate::plot::{save_line_chart, save_sample_grid};
use crate::Space;

/// Stream label for initial network weights under the root seed.
const STREAM_NET_INIT: u64 = 100;

const CHECKPOINT_DIR: &str = "checkpoint";
const TRACE_FILE: &str = "trace.jsonl";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::io(p, e))
}

/// Accepts either a checkpoint directory or a run directory holding one.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.join("checkpoint.toml").exists() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn open_checkpoint(p: &Path) -> CliResult<Checkpoint> {
    let ck = load_checkpoint(&checkpoint_dir(p))?;
    for w in &ck.warnings {
        log::warn!("{w}");
    }
    Ok(ck)
}

fn require_view(model: &FaVae, name: &str, what: &str) -> CliResult<()> {
    match model.view(name) {
        Some(_) => Ok(()),
        None => Err(CliError::invalid(format!(
            "{what}: unknown view `{name}` (known: {})",
            model
                .views
                .iter()
                .map(|v| v.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn is_vae(model: &FaVae, name: &str) -> bool {
    model.view(name).is_some_and(|v| v.kind() == ViewKind::Vae)
}

/// Writes `<stem>.favm`, `<stem>_latent.favm`, `<stem>_probabilities.favm`
/// when present, and a PNG grid for VAE views.
fn write_generated(dir: &Path, stem: &str, g: &Generated, image: bool) -> CliResult<()> {
    write_matrix(&dir.join(format!("{stem}.favm")), &g.values)?;
    write_matrix(&dir.join(format!("{stem}_latent.favm")), &g.latent)?;
    if let Some(p) = &g.probabilities {
        write_matrix(&dir.join(format!("{stem}_probabilities.favm")), p)?;
    }
    if image {
        save_sample_grid(&dir.join(format!("{stem}.png")), &g.values)?;
    }
    Ok(())
}

pub fn synth(resolved: &Resolved, spec: &Path) -> CliResult<()> {
    let mut table = read_table(spec)?;
    if resolved.has(&["seed"]) {
        let seed = i64::try_from(resolved.config.seed)
            .map_err(|_| CliError::invalid("seed: does not fit a signed 64-bit integer"))?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    let config: SynthConfig = from_table(table, &spec.display().to_string())?;
    let out = resolved.out_dir()?;
    let (data, truth) = generate_synthetic(&config)?;
    create_dir(&out)?;
    let manifest = write_dataset(&out, &data)?;
    truth.write(&out, &config)?;
    echo(&out, &to_toml(&config, "synthetic spec")?)?;
    log::info!(
        "wrote {} samples in {} views to {} (content hash {})",
        data.n_samples,
        data.views.len(),
        out.display(),
        manifest.content_hash
    );
    Ok(())
}

fn vae_net(cfg: &CliConfig, name: &str, index: usize, input_dim: usize) -> CliResult<VaeNet> {
    let vc = cfg.views.get(name).cloned().unwrap_or_default();
    if let Some(p) = &vc.pretrained {
        let src = p.view.as_deref().unwrap_or(name);
        let ck = open_checkpoint(&p.checkpoint)?;
        let net = ck
            .model
            .view(src)
            .and_then(|v| v.vae())
            .map(|l| l.net.clone())
            .ok_or_else(|| {
                CliError::invalid(format!(
                    "views.{name}.pretrained: {} has no VAE view `{src}`",
                    p.checkpoint.display()
                ))
            })?;
        if net.input_dim() != input_dim {
            return Err(CliError::invalid(format!(
                "views.{name}.pretrained: network expects {} columns, data has {input_dim}",
                net.input_dim()
            )));
        }
        return Ok(net);
    }
    let mut arch = vc.architecture;
    if arch.input_dim == 0 {
        arch.input_dim = input_dim;
    } else if arch.input_dim != input_dim {
        return Err(CliError::invalid(format!(
            "views.{name}.architecture.input_dim: {} but the data has {input_dim} columns",
            arch.input_dim
        )));
    }
    let mut rng = stream(cfg.seed, &[STREAM_NET_INIT, index as u64]);
    Ok(VaeNet::new(&arch, &mut rng)?)
}

fn build_model(cfg: &CliConfig, data: &MultiViewData) -> CliResult<FaVae> {
    for name in cfg.views.keys() {
        match data.view(name) {
            None => {
                return Err(CliError::invalid(format!(
                    "views.{name}: the dataset has no view `{name}`"
                )))
            }
            Some(v) if v.kind != ViewKind::Vae => {
                return Err(CliError::invalid(format!(
                    "views.{name}: settings apply to VAE views only, `{name}` is {}",
                    v.kind
                )))
            }
            Some(_) => {}
        }
    }
    let mut model = FaVae::new(cfg.model.clone(), data.n_samples, cfg.seed)?;
    for (i, v) in data.views.iter().enumerate() {
        let spec = match v.kind {
            ViewKind::RealLinear => ViewSpec::RealLinear,
            ViewKind::Multilabel => ViewSpec::Multilabel,
            ViewKind::FrozenLatent => ViewSpec::FrozenLatent,
            ViewKind::Vae => ViewSpec::Vae {
                net: vae_net(cfg, &v.name, i, v.values.ncols())?,
                settings: cfg.views.get(&v.name).cloned().unwrap_or_default().settings,
            },
        };
        model.attach_view(&v.name, spec, &v.values, v.mask.as_ref())?;
    }
    Ok(model)
}

fn view_series(
    trace: &TrainTrace,
    names: &[String],
    pick: fn(&favae::trainer::ViewRecord) -> Option<f64>,
) -> Vec<Vec<f64>> {
    names
        .iter()
        .map(|name| {
            trace
                .records
                .iter()
                .map(|r| {
                    r.views
                        .iter()
                        .find(|v| &v.name == name)
                        .and_then(pick)
                        .unwrap_or(f64::NAN)
                })
                .collect()
        })
        .collect()
}

/// Checkpoint, trace and curve plots of the run in `out`.
fn write_run(
    out: &Path,
    model: &FaVae,
    cfg: &CliConfig,
    data_hash: u64,
    trace: &TrainTrace,
) -> CliResult<()> {
    save_checkpoint(
        &out.join(CHECKPOINT_DIR),
        model,
        &cfg.train,
        data_hash,
        trace,
    )?;
    write_text(&out.join(TRACE_FILE), &trace.to_json_lines())?;
    let plots = out.join("plots");
    create_dir(&plots)?;
    let vae_views: Vec<String> = model
        .views
        .iter()
        .filter(|v| v.kind() == ViewKind::Vae)
        .map(|v| v.name.clone())
        .collect();
    save_line_chart(&plots.join("elbo.png"), &[trace.elbo_series()])?;
    save_line_chart(
        &plots.join("gll.png"),
        &view_series(trace, &vae_views, |v| v.gll),
    )?;
    save_line_chart(
        &plots.join("kl.png"),
        &view_series(trace, &vae_views, |v| v.kl),
    )?;
    Ok(())
}

pub fn train(resolved: &Resolved, resume: bool) -> CliResult<()> {
    let mut cfg = resolved.config.clone();
    let out = absolute(&resolved.out_dir()?)?;
    let manifest = cfg.data.manifest.clone().ok_or_else(|| {
        CliError::invalid("data.manifest: a dataset manifest is required (--manifest)")
    })?;
    cfg.data.manifest = Some(absolute(&manifest)?);
    for vc in cfg.views.values_mut() {
        if let Some(p) = &mut vc.pretrained {
            p.checkpoint = absolute(&p.checkpoint)?;
        }
    }
    cfg.out = Some(out.clone());
    cfg.train.validate()?;

    let (_, data) = load_manifest(&manifest)?;
    let hash = data.content_hash();
    let ck_dir = out.join(CHECKPOINT_DIR);
    let existing = ck_dir.join("checkpoint.toml").exists();
    let cap = cfg.train.max_outer_iters;
    let (mut model, mut trace) = match (resume, existing) {
        (true, true) => {
            let ck = open_checkpoint(&ck_dir)?;
            if ck.data_hash != hash {
                return Err(CliError::invalid(format!(
                    "data.manifest: content hash {hash:016x} differs from the checkpoint's {:016x}",
                    ck.data_hash
                )));
            }
            if ck.model.progress.converged || ck.model.progress.iteration >= cap {
                log::info!(
                    "run in {} already finished at iteration {}; nothing to do",
                    out.display(),
                    ck.model.progress.iteration
                );
                return Ok(());
            }
            (ck.model, ck.trace)
        }
        (true, false) => {
            return Err(CliError::invalid(format!(
                "out: no checkpoint to resume in {}",
                out.display()
            )))
        }
        (false, true) => {
            return Err(CliError::invalid(format!(
                "out: {} already holds a checkpoint; use --resume or another --out",
                out.display()
            )))
        }
        (false, false) => (build_model(&cfg, &data)?, TrainTrace::default()),
    };
    echo(&out, &config_text(&cfg)?)?;

    let every = match cfg.run.checkpoint_every {
        0 => usize::MAX,
        n => n,
    };
    let mut since_save = 0;
    while !model.progress.converged && model.progress.iteration < cap {
        let mut step = cfg.train.clone();
        step.max_outer_iters = model.progress.iteration + 1;
        match train_model(&mut model, &data, &step) {
            Ok(t) => {
                if let Some(r) = t.records.last() {
                    log::info!("iteration {} fa_elbo {:.6e}", r.iteration, r.fa_elbo);
                }
                trace.records.extend(t.records);
                trace.converged = t.converged;
            }
            Err(e) => {
                log::error!(
                    "training stopped at iteration {}; saving the last good state",
                    model.progress.iteration
                );
                write_run(&out, &model, &cfg, hash, &trace)?;
                return Err(e.into());
            }
        }
        since_save += 1;
        if since_save >= every {
            write_run(&out, &model, &cfg, hash, &trace)?;
            since_save = 0;
        }
    }
    if cfg.run.prune {
        let keep = model.prune_factors(cfg.model.prune_threshold)?;
        log::info!(
            "pruning kept {} of {} factors",
            keep.iter().filter(|&&k| k).count(),
            keep.len()
        );
    }
    write_run(&out, &model, &cfg, hash, &trace)?;
    log::info!(
        "stopped after {} iterations (converged: {})",
        model.progress.iteration,
        model.progress.converged
    );
    Ok(())
}

/// Observations given as inline rows or as a matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Evidence {
    Rows(Vec<Vec<f64>>),
    File { path: PathBuf },
}

impl Evidence {
    fn load(&self, base: &Path, what: &str) -> CliResult<DMatrix<f64>> {
        match self {
            Evidence::File { path } => {
                let p = if path.is_absolute() {
                    path.clone()
                } else {
                    base.join(path)
                };
                Ok(read_matrix(&p)?)
            }
            Evidence::Rows(rows) => {
                let d = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || d == 0 {
                    return Err(CliError::invalid(format!("{what}: no observations")));
                }
                if let Some(i) = rows.iter().position(|r| r.len() != d) {
                    return Err(CliError::invalid(format!(
                        "{what}[{i}]: expected {d} values, found {}",
                        rows[i].len()
                    )));
                }
                Ok(DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
            }
        }
    }
}

fn default_n_samples() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub target: String,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub given: BTreeMap<String, Evidence>,
}

pub fn generate(resolved: &Resolved, checkpoint: &Path, request: &Path) -> CliResult<()> {
    let mut req: GenerateRequest = from_table(read_table(request)?, "request")?;
    let ck = open_checkpoint(checkpoint)?;
    let model = &ck.model;
    require_view(model, &req.target, "request: target")?;
    if req.given.contains_key(&req.target) {
        return Err(CliError::invalid(format!(
            "request: given.{}: the target view cannot also be evidence",
            req.target
        )));
    }
    let base = request.parent().unwrap_or(Path::new("."));
    let mut evidence = BTreeMap::new();
    for (name, ev) in &req.given {
        let what = format!("request: given.{name}");
        require_view(model, name, &what)?;
        let x = ev.load(base, &what)?;
        evidence.insert(name.clone(), encode_view(model, name, &x)?);
    }
    let seed = *req.seed.get_or_insert(resolved.config.seed);
    let out = resolved.out_dir()?;
    let post = posterior_z_given(model, &evidence)?;
    let g = generate_from_z(model, &post.z.mean, &req.target, req.n_samples, seed)?;
    create_dir(&out)?;
    write_generated(&out, "samples", &g, is_vae(model, &req.target))?;
    write_matrix(&out.join("posterior_z.favm"), &post.z.mean)?;
    write_text(
        &out.join("request.resolved.toml"),
        &to_toml(&req, "request")?,
    )?;
    echo(&out, &config_text(&resolved.config)?)?;
    log::info!(
        "wrote {} samples of `{}` to {}",
        g.values.nrows(),
        req.target,
        out.display()
    );
    Ok(())
}

pub fn cross(
    resolved: &Resolved,
    checkpoint: &Path,
    from: &str,
    to: &str,
    input: &Path,
) -> CliResult<()> {
    let ck = open_checkpoint(checkpoint)?;
    let model = &ck.model;
    require_view(model, from, "--from")?;
    require_view(model, to, "--to")?;
    let x = read_matrix(input)?;
    let out = resolved.out_dir()?;
    let g = cross_generate(model, from, &x, to, resolved.config.seed)?;
    create_dir(&out)?;
    write_generated(&out, "cross", &g, is_vae(model, to))?;
    echo(&out, &config_text(&resolved.config)?)?;
    Ok(())
}

fn rows_to_matrix(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}

pub fn interpolate(
    resolved: &Resolved,
    checkpoint: &Path,
    space: Space,
    view: &str,
    endpoints: &Path,
    steps: usize,
) -> CliResult<()> {
    let ck = open_checkpoint(checkpoint)?;
    let model = &ck.model;
    require_view(model, view, "--view")?;
    let x = read_matrix(endpoints)?;
    if x.nrows() != 2 {
        return Err(CliError::invalid(format!(
            "--endpoints: expected 2 rows, found {}",
            x.nrows()
        )));
    }
    let lambdas = lambda_grid(steps)?;
    let codes = encode_view(model, view, &x)?;
    let out = resolved.out_dir()?;
    create_dir(&out)?;
    match space {
        Space::Private => {
            let path = interpolate_private(
                &codes.row(0).transpose(),
                &codes.row(1).transpose(),
                &lambdas,
            )?;
            let f = rows_to_matrix(&path);
            let g = decode_codes(model, view, f.clone())?;
            write_matrix(&out.join("codes.favm"), &f)?;
            write_generated(
                &out,
                &format!("interpolation_{view}"),
                &g,
                is_vae(model, view),
            )?;
        }
        Space::Global => {
            let evidence = BTreeMap::from([(view.to_string(), codes)]);
            let post = posterior_z_given(model, &evidence)?;
            let g_path = interpolate_global(
                &post.z.mean.row(0).transpose(),
                &post.z.mean.row(1).transpose(),
                &lambdas,
            )?;
            let z = rows_to_matrix(&g_path);
            write_matrix(&out.join("codes.favm"), &z)?;
            for v in &model.views {
                let g = generate_mean_from_z(model, &z, &v.name)?;
                write_generated(
                    &out,
                    &format!("interpolation_{}", v.name),
                    &g,
                    v.kind() == ViewKind::Vae,
                )?;
            }
        }
    }
    let text: String = lambdas.iter().map(|l| format!("{l}\n")).collect();
    write_text(&out.join("lambdas.txt"), &text)?;
    echo(&out, &config_text(&resolved.config)?)?;
    Ok(())
}

pub fn relevance(
    resolved: &Resolved,
    checkpoint: &Path,
    mode: &str,
    reference: Option<&str>,
) -> CliResult<()> {
    let mode: RelevanceMode = mode
        .parse()
        .map_err(|e: favae::FaError| CliError::invalid(format!("--mode: {e}")))?;
    let ck = open_checkpoint(checkpoint)?;
    if let Some(r) = reference {
        require_view(&ck.model, r, "--reference")?;
    }
    let report = latent_relevance(&ck.model, mode, reference)?;
    let out = resolved.out_dir()?;
    create_dir(&out)?;
    write_text(&out.join("relevance.txt"), &report.to_text())?;
    report.write_heat_map(&out.join("relevance.png"))?;
    let k = report.n_factors();
    let scores = DMatrix::from_fn(report.scores.len(), k, |v, f| report.scores[v][f]);
    write_matrix(&out.join("relevance_scores.favm"), &scores)?;
    echo(&out, &config_text(&resolved.config)?)?;
    Ok(())
}

pub fn inspect(checkpoint: &Path) -> CliResult<()> {
    let ck = open_checkpoint(checkpoint)?;
    let m = &ck.model;
    println!("samples: {}", m.n_samples());
    println!("factors: {}", m.n_factors());
    println!("seed: {}", m.seed);
    println!("data hash: {:016x}", ck.data_hash);
    println!("iteration: {}", m.progress.iteration);
    println!("converged: {}", m.progress.converged);
    if let Some(e) = m.progress.last_elbo {
        println!("fa_elbo: {e:.6e}");
    }
    println!("views:");
    for v in &m.views {
        let observed = v.observed.iter().filter(|&&o| o).count();
        print!(
            "  {} ({}): dim {}, observed {observed}",
            v.name,
            v.kind(),
            v.dim()
        );
        if let Some(t) = &v.noise {
            print!(", tau {:.4e}", t.mean());
        }
        if let Some(l) = v.vae() {
            print!(
                ", input {}, frozen {}",
                l.net.input_dim(),
                l.settings.frozen
            );
        }
        println!();
    }
    Ok(())
}
