use std::io::Write;
use std::path::{Path, PathBuf};

use dbenet_core::fusion::{DbeNet, Teacher};
use dbenet_core::geom::PointCloud;
use dbenet_core::io::manifest::encode_jsonl;
use dbenet_core::io::{gen_dataset, read_manifest, read_ply, Checkpoint, PairManifestEntry, PlyEncoding, Preset};
use dbenet_core::metrics::{BenchmarkReport, PairEvalRecord};
use dbenet_core::registration::register_pair;
use dbenet_core::tensor::set_backward_perturbation;
use dbenet_core::training::{self, default_scope, transfer_weights, FreezeMask, KdConfig, KdVariant, Scope, TrainPair};
use dbenet_core::verify::{self, Check};

use crate::config::RunConfig;
use crate::exit::{At, Failure, CHECK_FAILED, CONFIG, GENERATION, IO, REGISTRATION, TRAINING};

/// Any value other than empty or `0` perturbs one backward rule, so the
/// gradient suites can be shown to fail.
pub const PERTURB_ENV: &str = "DBENET_PERTURB_BACKWARD";

pub const MANIFEST: &str = "manifest.jsonl";
const CONFIG_FILE: &str = "config.json";

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(IO, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::new(IO, format!("{}: {e}", path.display())))
}

/// `report.txt` -> `report.txt.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::new(IO, format!("{}: {e}", path.display())))
}

fn load_cloud(path: &Path) -> Result<PointCloud, Failure> {
    read_ply(path).map_err(|e| Failure::new(IO, format!("{}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> Result<Vec<PairManifestEntry>, Failure> {
    read_manifest(path).map_err(|e| Failure::new(IO, format!("{}: {e}", path.display())))
}

fn load_pairs(dir: &Path) -> Result<Vec<TrainPair>, Failure> {
    let entries = load_manifest(&dir.join(MANIFEST))?;
    if entries.is_empty() {
        return Err(Failure::new(CONFIG, format!("{}: no training pairs", dir.display())));
    }
    entries
        .iter()
        .map(|e| {
            let (src, dst) = e.resolve(dir);
            Ok(TrainPair {
                id: e.id(),
                src: load_cloud(&src)?,
                dst: load_cloud(&dst)?,
                t_gt: e.transform().at(IO)?,
            })
        })
        .collect()
}

pub fn gen_synth(w: &mut dyn Write, cfg: RunConfig, preset: &str, pairs: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    let preset: Preset = preset.parse().at(CONFIG)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("data"));
    let data = gen_dataset(&cfg.synth, preset, pairs, cfg.seed).at(GENERATION)?;
    let name = serde_json::to_value(preset).at(CONFIG)?.as_str().unwrap_or("synth").to_string();
    let mut entries = Vec::with_capacity(data.len());
    for (k, p) in data.iter().enumerate() {
        let (src, dst) = (format!("pair_{k:04}_src.ply"), format!("pair_{k:04}_dst.ply"));
        write(&out.join(&src), &encode(&p.src)?)?;
        write(&out.join(&dst), &encode(&p.dst)?)?;
        entries.push(PairManifestEntry {
            src,
            dst,
            t_gt: p.t_gt.to_rows(),
            scene: format!("{name}_{k:04}"),
            overlap: p.overlap,
        });
    }
    write(&out.join(MANIFEST), encode_jsonl(&entries).at(IO)?.as_bytes())?;
    write(&out.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    writeln!(w, "wrote {} pairs to {}", entries.len(), out.display()).at(IO)?;
    Ok(())
}

fn encode(c: &PointCloud) -> Result<Vec<u8>, Failure> {
    dbenet_core::io::ply::encode_ply(c, PlyEncoding::BinaryLittleEndian).at(IO)
}

fn write_run(w: &mut dyn Write, out: &Path, ck: &Checkpoint, report: &training::TrainReport, cfg: &RunConfig) -> Result<(), Failure> {
    write(out, &ck.to_bytes().at(IO)?)?;
    write(&sibling(out, "log.jsonl"), encode_jsonl(&report.records).at(IO)?.as_bytes())?;
    write(&sibling(out, CONFIG_FILE), cfg.to_json().as_bytes())?;
    for (e, l) in report.epoch_loss.iter().enumerate() {
        writeln!(w, "epoch {:>3}  loss {l:.6}", e + 1).at(IO)?;
    }
    writeln!(w, "skipped {}  wrote {}", report.skipped, out.display()).at(IO)?;
    Ok(())
}

pub fn pretrain_teacher(w: &mut dyn Write, cfg: RunConfig, data: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = out.unwrap_or_else(|| cfg.out_dir.join("teacher.dbec"));
    let pairs = load_pairs(data)?;
    let mut teacher = Teacher::new(cfg.model.clone(), cfg.seed).at(CONFIG)?;
    let (ck, report) = training::pretrain_teacher(&mut teacher, &pairs, &cfg.train).at(TRAINING)?;
    write_run(w, &out, &ck, &report, &cfg)
}

pub fn transfer(w: &mut dyn Write, cfg: RunConfig, teacher: &Path, scope: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = out.unwrap_or_else(|| cfg.out_dir.join("student_init.dbec"));
    let explicit = match scope {
        "auto" => None,
        s => Some(Scope::parse_list(s).at(CONFIG)?),
    };
    let ck = load_checkpoint(teacher)?;
    let mut student = DbeNet::new(ck.config.clone(), cfg.seed).at(CONFIG)?;
    let scope = explicit.unwrap_or_else(|| default_scope(&ck, &student.params));
    let (params, report) = transfer_weights(&ck, &student.params, &scope).at(IO)?;
    student.params = params;
    write(&out, &Checkpoint::from_student(&student, cfg.seed).to_bytes().at(IO)?)?;
    let mut json = serde_json::to_string_pretty(&report).at(IO)?;
    json.push('\n');
    write(&sibling(&out, "transfer.json"), json.as_bytes())?;
    write(&sibling(&out, CONFIG_FILE), cfg.to_json().as_bytes())?;
    writeln!(w, "copied {}  skipped {}  wrote {}", report.copied.len(), report.skipped.len(), out.display()).at(IO)?;
    Ok(())
}

/// Applies `--kd`, keeping any temperature and weight from the config file.
pub fn set_kd(cfg: &mut RunConfig, kd: &str) -> Result<(), Failure> {
    let variant = match kd {
        "off" => {
            cfg.train.kd = None;
            return Ok(());
        }
        "kl" => KdVariant::Kl,
        "l1" => KdVariant::L1,
        other => return Err(Failure::new(CONFIG, format!("unknown --kd `{other}` (expected kl, l1 or off)"))),
    };
    cfg.train.kd = Some(KdConfig {
        variant,
        ..cfg.train.kd.unwrap_or_else(|| KdConfig::new(variant))
    });
    Ok(())
}

pub fn finetune(w: &mut dyn Write,
    cfg: RunConfig,
    data: &Path,
    init: &Path,
    freeze: &str,
    teacher: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let out = out.unwrap_or_else(|| cfg.out_dir.join("student.dbec"));
    let mask = FreezeMask::preset(freeze).at(CONFIG)?;
    let teacher = match (cfg.train.kd.is_some(), teacher) {
        (true, Some(p)) => Some(load_checkpoint(p)?.to_teacher().at(IO)?),
        (true, None) => return Err(Failure::new(CONFIG, "--kd needs --teacher")),
        (false, _) => None,
    };
    let init_ck = load_checkpoint(init)?;
    let mut net = init_ck.to_student().at(IO)?;
    let pairs = load_pairs(data)?;
    let report = training::finetune(&mut net, &pairs, &mask, &cfg.train, teacher.as_ref()).at(TRAINING)?;
    // The checkpoint keeps the seed its weights were initialized from.
    write_run(w, &out, &Checkpoint::from_student(&net, init_ck.seed), &report, &cfg)
}

/// `%.9g`-style rendering: nine significant digits, trailing zeros dropped.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{}", if v == 0.0 { 0.0 } else { v });
    }
    let exp = v.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        let s = trim(format!("{:.*}", (8 - exp).max(0) as usize, v));
        // Rounding can carry into a new leading digit; that is still 9 digits.
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        let s = format!("{v:.8e}");
        let (m, e) = s.split_once('e').expect("exponent form");
        format!("{}e{e}", trim(m.to_string()))
    }
}

pub fn register(w: &mut dyn Write, cfg: RunConfig, src: &Path, dst: &Path, ckpt: &Path) -> Result<(), Failure> {
    let net = load_checkpoint(ckpt)?.to_student().at(IO)?;
    let (a, b) = (load_cloud(src)?, load_cloud(dst)?);
    let (result, _) = register_pair(&net, &a, &b, cfg.match_mode, &cfg.ransac).at(REGISTRATION)?;
    if !result.has_model() {
        return Err(Failure::new(REGISTRATION, "no transform is supported by the correspondences"));
    }
    for row in result.transform.to_rows() {
        writeln!(w, "{}", row.map(sig9).join(" ")).at(IO)?;
    }
    writeln!(w, "inliers {}", result.inliers.len()).at(IO)?;
    Ok(())
}

pub fn evaluate(w: &mut dyn Write, cfg: RunConfig, manifest: &Path, ckpt: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = out.unwrap_or_else(|| cfg.out_dir.join("report.txt"));
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Failure::new(CONFIG, format!("{}: manifest is empty", manifest.display())));
    }
    let net = load_checkpoint(ckpt)?.to_student().at(IO)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut records = Vec::with_capacity(entries.len());
    let mut failed = 0;
    for e in &entries {
        let (src, dst) = e.resolve(base);
        let (a, b) = (load_cloud(&src)?, load_cloud(&dst)?);
        let t_gt = e.transform().at(IO)?;
        let (estimate, corr) = match register_pair(&net, &a, &b, cfg.match_mode, &cfg.ransac) {
            Ok((r, corr)) if r.has_model() => (Some(r.transform), corr),
            Ok((_, corr)) => (None, corr),
            Err(_) => (None, Vec::new()),
        };
        failed += usize::from(estimate.is_none());
        records.push(PairEvalRecord::evaluate(
            &e.id(),
            &corr,
            &a.points,
            &b.points,
            &t_gt,
            estimate.as_ref(),
            cfg.train.loss.tau_pos,
        ));
    }
    let report = BenchmarkReport::from_records(records).at(REGISTRATION)?;
    let table = report.table();
    write(&out, table.as_bytes())?;
    write(&sibling(&out, "jsonl"), encode_jsonl(&report.records).at(IO)?.as_bytes())?;
    write(&sibling(&out, CONFIG_FILE), cfg.to_json().as_bytes())?;
    write!(w, "{table}").at(IO)?;
    if failed > 0 {
        return Err(Failure::new(REGISTRATION, format!("registration failed on {failed} of {} pairs", entries.len())));
    }
    Ok(())
}

fn perturb_from_env() {
    let on = std::env::var(PERTURB_ENV).is_ok_and(|v| !v.is_empty() && v != "0");
    set_backward_perturbation(on);
}

fn report(w: &mut dyn Write, checks: &[Check]) -> Result<(), Failure> {
    for c in checks {
        writeln!(w, "{c}").at(IO)?;
    }
    let bad = checks.iter().filter(|c| !c.passed).count();
    writeln!(w, "{} checks, {bad} failed", checks.len()).at(IO)?;
    if bad > 0 {
        return Err(Failure::new(CHECK_FAILED, format!("{bad} checks failed")));
    }
    Ok(())
}

pub fn gradcheck(w: &mut dyn Write, scope: &str) -> Result<(), Failure> {
    perturb_from_env();
    report(w, &verify::gradcheck_suite(scope).at(CONFIG)?)
}

pub fn selftest(w: &mut dyn Write) -> Result<(), Failure> {
    perturb_from_env();
    report(w, &verify::selftest().at(CHECK_FAILED)?)
}
