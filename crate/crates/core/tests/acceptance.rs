//! End-to-end acceptance run. One line per criterion; exits non-zero if any
//! criterion fails. `RIFORMER_ACCEPTANCE=1,4,11` restricts the run.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use riformer::analysis::{erf_map, stage_distances, DEFAULT_BINS};
use riformer::bench::{compare_throughput, op_count, BenchProtocol};
use riformer::checkpoint::{self, Metadata};
use riformer::config::{ExperimentConfig, Overrides};
use riformer::data::{load_cifar10_binary, synth_dataset, Dataset, Split, SyntheticSpec, CIFAR_RECORD_BYTES};
use riformer::imitation::{eval_pair, load_from_teacher, loss_in, loss_in_prime, loss_out, loss_rel, loss_soft, relation_matrix};
use riformer::model::{CaptureSet, MixerSpec, Model, ModelSpec};
use riformer::reparam::{fuse_affine, random_probes, switch_to_deploy, verify_equivalence};
use riformer::tensor::Tensor;
use riformer::train::{EpochLog, Trainer};

const SEEDS: u64 = 3;

type Verdict = Result<(bool, String), Box<dyn std::error::Error>>;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn preset(name: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(format!("{name}.json"))).expect("preset loads");
    cfg.apply(&Overrides { seed: Some(seed), ..Default::default() });
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

struct Run {
    model: Model,
    log: Vec<EpochLog>,
}

impl Run {
    fn final_top1(&self) -> f64 {
        self.log.last().and_then(|r| r.val_top1).unwrap_or(0.0) as f64
    }
}

/// Trained models shared by the training-based criteria.
#[derive(Default)]
struct Lab {
    teacher: Option<Model>,
    val: Option<Dataset>,
    runs: BTreeMap<(String, u64), Run>,
}

impl Lab {
    fn teacher(&mut self) -> Result<Model, Box<dyn std::error::Error>> {
        if let Some(t) = &self.teacher {
            return Ok(t.clone());
        }
        let cfg = preset("teacher", 0);
        let data = cfg.data()?;
        let (train, val) = (data.train.load()?, data.val.as_ref().expect("teacher val split").load()?);
        let start = Instant::now();
        let out = Trainer::new(&cfg.train_config()?).run(Model::build(&cfg.model, 0)?, None, &train, Some(&val))?;
        eprintln!(
            "  teacher: val top-1 {:.3} in {:.0}s",
            out.log.last().and_then(|r| r.val_top1).unwrap_or(0.0),
            start.elapsed().as_secs_f64()
        );
        self.teacher = Some(out.model.clone());
        self.val = Some(val);
        Ok(out.model)
    }

    fn val(&mut self) -> Result<&Dataset, Box<dyn std::error::Error>> {
        self.teacher()?;
        Ok(self.val.as_ref().expect("set with the teacher"))
    }

    fn run(&mut self, name: &str, seed: u64) -> Result<&Run, Box<dyn std::error::Error>> {
        let key = (name.to_string(), seed);
        if !self.runs.contains_key(&key) {
            let teacher = self.teacher()?;
            let cfg = preset(name, seed);
            let tc = cfg.train_config()?;
            let data = cfg.data()?;
            let (train, val) = (data.train.load()?, data.val.as_ref().expect("val split").load()?);
            let start = Instant::now();
            let student = Model::build(&cfg.model, tc.seed)?;
            let needs_teacher = tc.recipe != "ce";
            let out = Trainer::new(&tc).run(student, needs_teacher.then_some(&teacher), &train, Some(&val))?;
            let run = Run { model: out.model, log: out.log };
            eprintln!("  {name} seed {seed}: val top-1 {:.3} in {:.0}s", run.final_top1(), start.elapsed().as_secs_f64());
            self.runs.insert(key.clone(), run);
        }
        Ok(&self.runs[&key])
    }
}

fn fusion_exactness() -> Verdict {
    let spec = ModelSpec::nano(MixerSpec::affine());
    let mut worst = 0f32;
    let mut failures = 0;
    for i in 0..100 {
        let train = common::randomize(&Model::build(&spec, i)?, 1000 + i);
        let deploy = switch_to_deploy(&train)?;
        let report = verify_equivalence(&train, &deploy, 1, 1e-5, i)?;
        worst = worst.max(report.max_abs_diff);
        failures += usize::from(!report.pass);
    }
    Ok((failures == 0, format!("100 models, worst max-abs diff {worst:.2e}, {failures} over 1e-5")))
}

fn symbolic_fusion() -> Verdict {
    let table: [([f32; 4], [f32; 2]); 4] = [
        ([2.0, 0.5, 3.0, 0.1], [4.0, 1.1]),
        ([1.0, 0.0, 1.0, 0.0], [0.0, 0.0]),
        ([1.0, 0.0, 0.0, 0.0], [-1.0, 0.0]),
        ([-1.5, 2.0, 0.5, -1.0], [0.75, -2.0]),
    ];
    let mut bad = Vec::new();
    for ([g, b, s, t], [gw, bw]) in table {
        let f = fuse_affine(&[g], &[b], &[s], &[t])?;
        if f.gamma[0] != gw || f.beta[0] != bw {
            bad.push(format!("({g},{b},{s},{t}) -> ({}, {})", f.gamma[0], f.beta[0]));
        }
    }
    Ok((bad.is_empty(), if bad.is_empty() { "4 rows exact".into() } else { bad.join("; ") }))
}

fn gradient_suite() -> Verdict {
    let results = common::gradient_suite(10);
    let (name, worst) = results.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<_> = results.iter().filter(|(_, e)| !(*e <= common::FD_TOL)).map(|(n, _)| *n).collect();
    Ok((failed.is_empty(), format!("{} kernels x 10 seeds, worst {name} {worst:.2e}, failing {failed:?}", results.len())))
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = common::random(&[2, 8, 4, 4], &mut rng);
    let logits = common::random(&[4, 10], &mut rng);
    let zeros = [
        ("in", eval_pair(&x, &x, loss_in)?),
        ("in_prime", eval_pair(&x, &x, loss_in_prime)?),
        ("out", eval_pair(&x, &x, loss_out)?),
        ("rel", eval_pair(&x, &x, loss_rel)?),
        ("soft", eval_pair(&logits, &logits, |t, a, b| loss_soft(t, a, b, 4.0))?),
    ];
    let nonzero: Vec<_> = zeros.iter().filter(|(_, v)| *v != 0.0).collect();
    let y = common::random(&[2, 8, 4, 4], &mut rng);
    let scaled = Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| v * 3.7).collect())?;
    let scale_gap = (eval_pair(&x, &y, loss_rel)? - eval_pair(&x, &scaled, loss_rel)?).abs();
    let r = relation_matrix(&Tensor::new(vec![1, 2, 1, 2], vec![1.0, 1.0, 0.0, 1.0])?)?;
    let h = std::f32::consts::FRAC_1_SQRT_2;
    let hand = r.data().iter().zip([1.0, h, h, 1.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    let pass = nonzero.is_empty() && scale_gap <= 1e-6 && hand <= 1e-5;
    Ok((pass, format!("non-zero on identical inputs {nonzero:?}, rel scale gap {scale_gap:.1e}, hand case err {hand:.1e}")))
}

fn identity_at_init() -> Verdict {
    let affine = Model::build(&ModelSpec::nano(MixerSpec::affine()), 3)?;
    let identity = Model::build(&ModelSpec::nano(MixerSpec::identity()), 3)?;
    let x = random_probes(affine.spec(), 4, 9);
    let diff = affine.infer(&x)?.max_abs_diff(&identity.infer(&x)?)?;

    let teacher = common::randomize(&Model::build(&ModelSpec::nano(MixerSpec::pooling(3)), 5)?, 6);
    let constant = Tensor::full(&[2, 3, 64, 64], 0.3);
    let eval = teacher.evaluate(&constant, &CaptureSet::all(teacher.spec()))?;
    let pool_max = eval.blocks.values().flat_map(|b| b.mixer_out.data().iter().map(|v| v.abs())).fold(0.0, f32::max);

    let student = load_from_teacher(&Model::build(&ModelSpec::nano(MixerSpec::affine()), 8)?, &teacher)?;
    let same = student.infer(&constant)?.data().iter().zip(eval.logits.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        diff == 0.0 && pool_max == 0.0 && same,
        format!("affine vs identity diff {diff:e}, pooling on constant max {pool_max:e}, teacher-loaded logits identical {same}"),
    ))
}

fn guideline_ordering(lab: &mut Lab) -> Verdict {
    let mut finals: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for name in ["guideline1_ce", "guideline1_soft", "guideline3_MI"] {
        for seed in 0..SEEDS {
            finals.entry(name).or_default().push(lab.run(name, seed)?.final_top1());
        }
    }
    let m = |n: &str| median(finals[n].clone());
    let (ce, soft, mi) = (m("guideline1_ce"), m("guideline1_soft"), m("guideline3_MI"));
    let pass = soft - ce >= 0.01 && mi - soft >= 0.01;
    if !pass {
        for ((name, seed), run) in &lab.runs {
            for row in &run.log {
                eprintln!("    {name} seed {seed}: {}", row.csv_row());
            }
        }
    }
    Ok((pass, format!("median top-1 CE {ce:.3} < soft-KD {soft:.3} < soft-KD+MI {mi:.3}, per seed {finals:?}")))
}

fn teacher_init(lab: &mut Lab) -> Verdict {
    let target = median((0..SEEDS).map(|s| lab.run("guideline1_soft", s).map(Run::final_top1)).collect::<Result<_, _>>()?);
    let mut fractions = Vec::new();
    for seed in 0..SEEDS {
        let run = lab.run("guideline5_init", seed)?;
        let epochs = run.log.len();
        let reached = run.log.iter().position(|r| r.val_top1.unwrap_or(0.0) as f64 >= target).map(|e| e + 1);
        fractions.push(reached.map_or(f64::INFINITY, |e| e as f64 / epochs as f64));
    }
    let m = median(fractions.clone());
    Ok((m <= 0.6, format!("soft-KD final {target:.3} reached at epoch fractions {fractions:?}, median {m:.2} (<= 0.60)")))
}

fn throughput_direction() -> Verdict {
    let cfg = preset("guideline3_MI", 0);
    let protocol: BenchProtocol = cfg.bench.clone().unwrap_or_default();
    let train = Model::build(&ModelSpec::nano(MixerSpec::affine()), 0)?;
    let deploy = switch_to_deploy(&train)?;
    let teacher = Model::build(&ModelSpec::nano(MixerSpec::pooling(3)), 0)?;
    let reports = compare_throughput(&[("pooling", &teacher), ("affine-train", &train), ("affine-deploy", &deploy)], &protocol)?;
    let (tp_teacher, tp_train, tp_deploy) = (&reports[0], &reports[1], &reports[2]);
    let (r_train, r_teacher) = (tp_deploy.images_per_s / tp_train.images_per_s, tp_deploy.images_per_s / tp_teacher.images_per_s);
    let (ops_train, ops_deploy) = (op_count(&train, 1)?, op_count(&deploy, 1)?);
    let fewer = ops_deploy.flops < ops_train.flops && ops_deploy.kernels < ops_train.kernels;
    Ok((
        r_train >= 1.02 && r_teacher >= 1.02 && fewer,
        format!(
            "deploy {:.1} img/s = {r_train:.3}x train form, {r_teacher:.3}x pooling; flops {} -> {}, kernels {} -> {} ({} threads)",
            tp_deploy.images_per_s, ops_train.flops, ops_deploy.flops, ops_train.kernels, ops_deploy.kernels, tp_deploy.thread_count
        ),
    ))
}

fn probe_set(lab: &mut Lab, n: usize) -> Result<Tensor, Box<dyn std::error::Error>> {
    let val = lab.val()?;
    let per_class = n / val.num_classes;
    let mut idx = Vec::new();
    for class in 0..val.num_classes {
        idx.extend(val.labels().iter().enumerate().filter(|(_, &l)| l == class).take(per_class).map(|(i, _)| i));
    }
    Ok(val.images(&idx)?)
}

fn erf_direction(lab: &mut Lab) -> Verdict {
    let probes = probe_set(lab, 40)?;
    let (mut mi, mut ce) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        mi.push(erf_map(&lab.run("guideline3_MI", seed)?.model, &probes, 8)?.count_above(0.01) as f64);
        ce.push(erf_map(&lab.run("guideline1_ce", seed)?.model, &probes, 8)?.count_above(0.01) as f64);
    }
    let (m_mi, m_ce) = (median(mi.clone()), median(ce.clone()));
    Ok((m_mi > m_ce, format!("pixels above 0.01: MI {mi:?} (median {m_mi}), CE {ce:?} (median {m_ce})")))
}

fn feature_direction(lab: &mut Lab) -> Verdict {
    let probes = probe_set(lab, 100)?;
    let teacher = lab.teacher()?;
    let (mut mi, mut ce) = (vec![Vec::new(); 4], vec![Vec::new(); 4]);
    for seed in 0..SEEDS {
        let d_mi = stage_distances(&lab.run("guideline3_MI", seed)?.model, &teacher, &probes, DEFAULT_BINS)?;
        let d_ce = stage_distances(&lab.run("guideline1_ce", seed)?.model, &teacher, &probes, DEFAULT_BINS)?;
        for s in 0..4 {
            mi[s].push(d_mi[s]);
            ce[s].push(d_ce[s]);
        }
    }
    let m_mi: Vec<f64> = mi.into_iter().map(median).collect();
    let m_ce: Vec<f64> = ce.into_iter().map(median).collect();
    let closer = m_mi.iter().zip(&m_ce).filter(|(a, b)| a < b).count();
    Ok((closer >= 3, format!("MI closer to teacher in {closer}/4 stages; W1 MI {m_mi:.3?} vs CE {m_ce:.3?}")))
}

fn checkpoint_and_cifar() -> Verdict {
    let dir = tempfile::tempdir()?;
    let model = common::randomize(&Model::build(&ModelSpec::nano(MixerSpec::affine()), 21)?, 22);
    let path = dir.path().join("m.ckpt");
    let meta = Metadata { seed: Some(21), recipe: Some("ce".into()), epoch: Some(1), ..Default::default() };
    checkpoint::save_checkpoint(&model, &meta, &path)?;
    let (back, meta_back) = checkpoint::load_checkpoint(&path)?;
    let bits = |m: &Model| m.params.leaves().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let exact = bits(&back) == bits(&model) && meta_back == meta && checkpoint::to_bytes(&back, &meta)? == std::fs::read(&path)?;

    let fixture = synth_dataset(&SyntheticSpec { seed: 3, num_classes: 10, samples_per_class: 7, resolution: 32, noise: 0.1, distractor: 0.5 })?;
    let bin = dir.path().join("test_batch.bin");
    fixture.write_records(&bin)?;
    let size = std::fs::metadata(&bin)?.len() as usize;
    let loaded = load_cifar10_binary(dir.path(), Split::Test)?;
    let same = loaded.labels() == fixture.labels() && (0..fixture.len()).all(|i| loaded.image(i) == fixture.image(i));
    let mut truncated = std::fs::read(&bin)?;
    truncated.pop();
    std::fs::write(&bin, truncated)?;
    let rejects = load_cifar10_binary(&bin, Split::Test).is_err();
    Ok((
        exact && size == 70 * CIFAR_RECORD_BYTES && same && rejects,
        format!("checkpoint bit-exact {exact}; fixture {size} bytes, records identical {same}, truncated file rejected {rejects}"),
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("RIFORMER_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut lab = Lab::default();
    type Check<'a> = Box<dyn FnMut(&mut Lab) -> Verdict + 'a>;
    let checks: Vec<(usize, &str, Check)> = vec![
        (1, "fusion exactness", Box::new(|_| fusion_exactness())),
        (2, "symbolic fusion", Box::new(|_| symbolic_fusion())),
        (3, "gradient suite", Box::new(|_| gradient_suite())),
        (4, "loss identities", Box::new(|_| loss_identities())),
        (5, "identity equivalence at init", Box::new(|_| identity_at_init())),
        (8, "throughput direction", Box::new(|_| throughput_direction())),
        (11, "checkpoint and CIFAR-10 loader", Box::new(|_| checkpoint_and_cifar())),
        (6, "guideline ordering", Box::new(guideline_ordering)),
        (7, "teacher initialization", Box::new(teacher_init)),
        (9, "ERF direction", Box::new(erf_direction)),
        (10, "feature distribution direction", Box::new(feature_direction)),
    ];
    let mut lines = Vec::new();
    let total = Instant::now();
    for (n, name, mut check) in checks {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check(&mut lab) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let line = format!(
            "criterion {n:>2} {:<32} {} ({:.1}s) {detail}",
            name,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push((n, pass));
    }
    let failed: Vec<usize> = lines.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} passed in {:.0}s", lines.len() - failed.len(), lines.len(), total.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
