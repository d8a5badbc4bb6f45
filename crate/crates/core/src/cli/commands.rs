use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};

use super::config::{gradcheck_base, load_data, resolve, RunConfig};
use super::{Command, EXIT_CHECK, EXIT_OK};
use crate::data::{stream, synth_shapes, Dataset, ShapeClass};
use crate::geometry::{farthest_point_sample, knn_search, Point};
use crate::model::train::{evaluate, sample_loss, train, EvalReport};
use crate::model::{count_costs, AttnMode, Fusion, Model, ModelConfig};
use crate::numerics::checkpoint;
use crate::numerics::gradcheck::{compare_gradients, GradCheckConfig};
use crate::numerics::Graph;
use crate::Error;

pub(crate) fn dispatch(cmd: Command, overrides: &[(String, String)]) -> anyhow::Result<u8> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = resolve(&RunConfig::default(), config.as_deref(), overrides)?;
            cmd_train(cfg, out)
        }
        Command::Eval {
            config,
            ckpt,
            split,
            out,
        } => {
            let cfg = resolve(&RunConfig::default(), config.as_deref(), overrides)?;
            cmd_eval(&cfg, &ckpt, &split, out)
        }
        Command::Gradcheck {
            config,
            inject_bug,
            tol,
            h,
        } => {
            let cfg = resolve(&gradcheck_base(), config.as_deref(), overrides)?;
            cmd_gradcheck(&cfg, inject_bug, tol, h)
        }
        Command::Ablate { config, sweep, out } => {
            let cfg = resolve(&RunConfig::default(), config.as_deref(), overrides)?;
            cmd_ablate(&cfg, &sweep, out)
        }
        Command::Bench {
            sizes,
            ks,
            reps,
            out,
        } => cmd_bench(&sizes, &ks, reps, out.as_deref()),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output.dir".into()))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn metrics_header(report: &EvalReport, ds: &Dataset) -> String {
    match report {
        EvalReport::Classify(_) => "epoch,loss,oa,macc".into(),
        EvalReport::Segment(m) => {
            let mut h = String::from("epoch,loss,inst_miou,cls_miou");
            for c in 0..m.per_category.len() {
                let name = ds.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
                let _ = write!(h, ",iou_{name}");
            }
            h
        }
    }
}

fn metrics_fields(report: &EvalReport) -> String {
    match report {
        EvalReport::Classify(m) => format!("{:.6},{:.6}", m.oa, m.macc),
        EvalReport::Segment(m) => {
            let mut s = format!("{:.6},{:.6}", m.inst_miou, m.cls_miou);
            for v in &m.per_category {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push(','),
                }
            }
            s
        }
    }
}

fn report_pairs(report: &EvalReport) -> Vec<(&'static str, f64)> {
    match report {
        EvalReport::Classify(m) => vec![("oa", m.oa), ("macc", m.macc)],
        EvalReport::Segment(m) => vec![("inst_miou", m.inst_miou), ("cls_miou", m.cls_miou)],
    }
}

fn cmd_train(cfg: RunConfig, out: Option<PathBuf>) -> anyhow::Result<u8> {
    let dir = out_dir(out, &cfg)?;
    let data = load_data(&cfg)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    let resolved = serde_json::to_string_pretty(&cfg)? + "\n";
    std::fs::write(dir.join("resolved_config.json"), resolved)?;
    let mut model = Model::build(&cfg.model)?;
    let test = (!data.test.is_empty()).then_some(&data.test);
    let eval_set = test.unwrap_or(&data.train);
    let metrics_path = dir.join("metrics.csv");
    let mut csv = String::new();
    let start = Instant::now();
    let mut io_err = None;
    train(&mut model, &data.train, test, &cfg.train, |rec| {
        if csv.is_empty() {
            csv = metrics_header(&rec.eval, eval_set) + "\n";
        }
        let _ = writeln!(csv, "{},{:.6},{}", rec.epoch, rec.loss, metrics_fields(&rec.eval));
        if let Err(e) = std::fs::write(&metrics_path, &csv) {
            io_err.get_or_insert(e);
        }
        let pairs: Vec<String> = report_pairs(&rec.eval)
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}"))
            .collect();
        println!(
            "epoch={} loss={:.6} {} elapsed={:.1}s",
            rec.epoch,
            rec.loss,
            pairs.join(" "),
            start.elapsed().as_secs_f64()
        );
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics.csv");
    }
    checkpoint::save(&model.store, dir.join("final.ckpt"))?;
    println!("wrote {}", dir.display());
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, which: &str, out: Option<PathBuf>) -> anyhow::Result<u8> {
    let mut model = Model::build(&cfg.model)?;
    checkpoint::load(&mut model.store, ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let data = load_data(cfg)?;
    let ds = match which {
        "test" => data.test,
        "train" => data.train,
        "all" => {
            let mut d = data.train;
            d.samples.extend(data.test.samples);
            d
        }
        other => bail!(Error::Config(format!("unknown split `{other}`; use test, train or all"))),
    };
    let report = evaluate(&model, &ds)?;
    let pairs = report_pairs(&report);
    println!("split={which}");
    println!("samples={}", ds.len());
    for (k, v) in &pairs {
        println!("{k}={v:.6}");
    }
    let dir = match out {
        Some(d) => d,
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("eval.csv");
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        let keys: Vec<&str> = pairs.iter().map(|(k, _)| *k).collect();
        writeln!(f, "ckpt,split,samples,{}", keys.join(","))?;
    }
    let vals: Vec<String> = pairs.iter().map(|(_, v)| format!("{v:.6}")).collect();
    writeln!(f, "{},{which},{},{}", ckpt.display(), ds.len(), vals.join(","))?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cfg: &RunConfig, inject_bug: bool, tol: f64, h: f64) -> anyhow::Result<u8> {
    let model = Model::build(&cfg.model)?;
    let n = cfg.model.n_input;
    let ds = synth_shapes(&[ShapeClass::Cube], 1, n, cfg.data.rotation, cfg.data.seed)?;
    let cloud = &ds.samples[0];
    let loss = |s: &crate::numerics::ParamStore, g: &mut Graph| sample_loss(&model, s, g, cloud, 0);
    let mut store = model.store.clone();
    let mut g = Graph::new();
    let l = loss(&store, &mut g)?;
    let grads = g.gradients(l, store.len())?;
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    if inject_bug {
        let id = store.ids().next().context("model has no parameters")?;
        let p = store.get_mut(id);
        for v in p.grad.data_mut() {
            *v = *v * 1.01 + 1e-4;
        }
        println!("injected gradient error into {}", p.id);
    }
    let gc = GradCheckConfig {
        tol,
        h,
        ..GradCheckConfig::default()
    };
    let report = compare_gradients(&mut store, loss, &gc)?;
    for p in &report.per_param {
        println!(
            "param={} checked={} max_rel_err={:.3e} worst_index={}",
            p.name, p.checked, p.max_rel_err, p.worst_index
        );
    }
    println!("checked={}", report.checked);
    println!("max_rel_err={:.3e}", report.max_rel_err);
    println!("worst_param={} worst_index={}", report.worst_param, report.worst_index);
    println!("tol={:e}", report.tol);
    if report.passed() {
        println!("result=pass");
        Ok(EXIT_OK)
    } else {
        println!("result=fail");
        Ok(EXIT_CHECK)
    }
}

struct Variant {
    label: Vec<String>,
    cfg: ModelConfig,
    mode: AttnMode,
}

fn sweep_variants(base: &ModelConfig, sweep: &str) -> anyhow::Result<(Vec<&'static str>, Vec<Variant>)> {
    let cross = |cfg: ModelConfig, label: Vec<String>| Variant {
        label,
        cfg,
        mode: AttnMode::Cross,
    };
    match sweep {
        "grouping" => {
            let mut v = Vec::new();
            for d in [2, 4] {
                for k in [8, 16, 32] {
                    let cfg = ModelConfig {
                        d_ratio: d,
                        k,
                        ..base.clone()
                    };
                    v.push(cross(cfg, vec![d.to_string(), k.to_string()]));
                }
            }
            Ok((vec!["d_ratio", "k"], v))
        }
        "fusion" => {
            let v = Fusion::ALL
                .iter()
                .map(|&f| {
                    let cfg = ModelConfig {
                        fusion: f,
                        ..base.clone()
                    };
                    cross(cfg, vec![f.name().to_string()])
                })
                .collect();
            Ok((vec!["fusion"], v))
        }
        "attention" => {
            if !base.fusion.uses_tokens() {
                bail!(Error::Config(format!(
                    "attention sweep needs a token fusion mode, got {}",
                    base.fusion.name()
                )));
            }
            let ca = ModelConfig {
                msa_baseline: false,
                ..base.clone()
            };
            let msa = ModelConfig {
                msa_baseline: true,
                ..base.clone()
            };
            Ok((
                vec!["attention"],
                vec![
                    cross(ca, vec!["ca".into()]),
                    Variant {
                        label: vec!["msa".into()],
                        cfg: msa,
                        mode: AttnMode::SelfAttn,
                    },
                ],
            ))
        }
        other => bail!(Error::Config(format!(
            "unknown sweep `{other}`; use grouping, fusion or attention"
        ))),
    }
}

fn cmd_ablate(cfg: &RunConfig, sweep: &str, out: Option<PathBuf>) -> anyhow::Result<u8> {
    let (label_cols, variants) = sweep_variants(&cfg.model, sweep)?;
    for v in &variants {
        v.cfg
            .validate()
            .with_context(|| format!("variant {}", v.label.join("/")))?;
    }
    let dir = out_dir(out, cfg)?;
    let data = load_data(cfg)?;
    let test = (!data.test.is_empty()).then_some(&data.test);
    let path = dir.join(format!("ablate_{sweep}.csv"));
    let mut csv = format!("{},accuracy,macs,params\n", label_cols.join(","));
    for v in variants {
        let mut model = Model::build(&v.cfg)?;
        let hist = train(&mut model, &data.train, test, &cfg.train, |_| {})?;
        let acc = match hist.epochs.last() {
            Some(r) => r.eval.headline(),
            None => evaluate(&model, test.unwrap_or(&data.train))?.headline(),
        };
        let costs = count_costs(&model, v.mode)?;
        let row = format!("{},{acc:.6},{},{}", v.label.join(","), costs.macs, costs.params);
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
        std::fs::write(&path, &csv)?;
    }
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn bench_cloud(n: usize) -> Vec<Point> {
    use rand::Rng as _;
    let mut rng = stream(0, "bench", n as u64);
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

fn best_of<T>(reps: usize, mut f: impl FnMut() -> crate::Result<T>) -> crate::Result<u128> {
    let mut best = u128::MAX;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_nanos());
    }
    Ok(best)
}

fn cmd_bench(sizes: &[usize], ks: &[usize], reps: usize, out: Option<&Path>) -> anyhow::Result<u8> {
    let mut csv = String::from("n,k,kernel,nanos\n");
    for &n in sizes {
        if n < 2 {
            bail!(Error::Config(format!("bench size {n} is below 2")));
        }
        let pts = bench_cloud(n);
        let fps = best_of(reps, || farthest_point_sample(&pts, n / 2))?;
        let _ = writeln!(csv, "{n},,fps,{fps}");
        let centers = farthest_point_sample(&pts, n / 2)?;
        for &k in ks {
            let k = k.min(n);
            let knn = best_of(reps, || knn_search(&pts, &centers, k))?;
            let _ = writeln!(csv, "{n},{k},knn,{knn}");
        }
    }
    print!("{csv}");
    if let Some(p) = out {
        std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(EXIT_OK)
}
