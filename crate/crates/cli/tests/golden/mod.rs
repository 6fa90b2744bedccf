//! Golden pipelines: each scenario drives the `gmix` binary and checks its
//! files against the same operations composed in-library. Outputs must agree
//! byte for byte once both sides go through the shared serializers, and the
//! numbers parsed back from CSV must equal the library values exactly.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use gmix::algebra::{self, SourceWeights};
use gmix::measurement::{self, KChoice};
use gmix::sampling::sample_gmm;
use gmix::{em_fit, reduce, select_model, Block, BlockIndex, Criterion, CurveSpec, Dataset, EmConfig, GmmParams,
    QualityRegion, SeededStream};
use gmix_cli::csvio::{parse_points, render_table, Cell};
use gmix_cli::GmmDocument;
use nalgebra::{DMatrix, DVector};
use tempfile::TempDir;

pub type Check = Result<(), String>;

pub struct Workdir {
    dir: TempDir,
}

impl Workdir {
    pub fn new() -> Self {
        Self {
            dir: tempfile::tempdir().expect("temp dir"),
        }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) {
        std::fs::write(self.path().join(name), bytes).expect("write fixture");
    }

    pub fn write_gmm(&self, name: &str, g: &GmmParams) {
        self.write(name, GmmDocument::new(g.clone()).serialize());
    }

    pub fn read(&self, name: &str) -> Result<Vec<u8>, String> {
        std::fs::read(self.path().join(name)).map_err(|e| format!("{name}: {e}"))
    }

    pub fn read_gmm(&self, name: &str) -> Result<GmmParams, String> {
        let bytes = self.read(name)?;
        GmmDocument::parse(&String::from_utf8_lossy(&bytes))
            .map(|d| d.params)
            .map_err(|e| format!("{name}: {e}"))
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gmix"))
            .args(args)
            .current_dir(self.path())
            .output()
            .expect("spawn gmix")
    }

    /// Runs and insists on exit code 0; returns standard output.
    pub fn ok(&self, args: &[&str]) -> Result<Vec<u8>, String> {
        let out = self.run(args);
        if out.status.code() != Some(0) {
            return Err(format!(
                "`gmix {}` exited with {:?}: {}",
                args.join(" "),
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(out.stdout)
    }

    pub fn expect_gmm(&self, name: &str, want: &GmmParams) -> Check {
        let got = self.read(name)?;
        let want_text = GmmDocument::new(want.clone()).serialize();
        if got != want_text.as_bytes() {
            return Err(format!("{name} differs from the library result"));
        }
        Ok(())
    }

    pub fn expect_bytes(&self, name: &str, want: &[u8]) -> Check {
        if self.read(name)? != want {
            return Err(format!("{name} differs from the library result"));
        }
        Ok(())
    }
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn lib<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| format!("library call failed: {e}"))
}

/// Numeric columns of a CSV file, read back exactly.
fn csv_values(bytes: &[u8]) -> Result<Dataset, String> {
    parse_points(bytes).map(|(_, d)| d).map_err(|e| e.message)
}

pub fn six_a() -> GmmParams {
    GmmParams::univariate(&[
        (0.10, -2.0, 0.30),
        (0.20, -1.0, 0.20),
        (0.25, 0.0, 0.50),
        (0.15, 1.2, 0.10),
        (0.20, 2.5, 0.40),
        (0.10, 4.0, 0.25),
    ])
    .unwrap()
}

pub fn six_b() -> GmmParams {
    GmmParams::univariate(&[
        (0.30, -1.5, 0.20),
        (0.10, -0.5, 0.05),
        (0.15, 0.5, 0.30),
        (0.20, 1.0, 0.15),
        (0.15, 2.0, 0.60),
        (0.10, 3.0, 0.10),
    ])
    .unwrap()
}

pub fn joint_2d() -> GmmParams {
    let c = |w: f64, m: [f64; 2], s: [f64; 4]| {
        gmix::GaussianComponent::new(w, DVector::from_row_slice(&m), DMatrix::from_row_slice(2, 2, &s)).unwrap()
    };
    GmmParams::new(vec![
        c(0.5, [0.0, 0.0], [1.0, 0.6, 0.6, 1.0]),
        c(0.3, [2.0, -1.0], [0.5, -0.1, -0.1, 0.8]),
        c(0.2, [-1.0, 2.0], [0.7, 0.2, 0.2, 0.4]),
    ])
    .unwrap()
}

/// `convolve` then `moments`: the moments file is the library's moments of
/// the library convolution, and they are additive.
pub fn convolve_then_moments(w: &Workdir) -> Check {
    let (a, b) = (six_a(), six_b());
    w.write_gmm("a.gmm", &a);
    w.write_gmm("b.gmm", &b);
    w.ok(&["convolve", "a.gmm", "b.gmm", "-o", "z.gmm"])?;
    let z = lib(algebra::convolve(&a, &b))?;
    w.expect_gmm("z.gmm", &z)?;
    w.ok(&["moments", "z.gmm", "-o", "m.csv"])?;
    let mz = z.moments();
    let want = render_table(
        &["row", "mean", "cov_0"],
        &[vec![Cell::from(0usize), mz.mean[0].into(), mz.covariance[(0, 0)].into()]],
    );
    w.expect_bytes("m.csv", &want)?;
    let (ma, mb) = (a.moments(), b.moments());
    let got = csv_values(&w.read("m.csv")?)?;
    ensure((got.point(0)[1] - (ma.mean[0] + mb.mean[0])).abs() < 1e-12, || "mean not additive".into())?;
    ensure(
        (got.point(0)[2] - (ma.covariance[(0, 0)] + mb.covariance[(0, 0)])).abs() < 1e-12,
        || "variance not additive".into(),
    )
}

/// `fuse` with the evidence file.
pub fn fuse_with_evidence(w: &Workdir) -> Check {
    let (a, b) = (six_a(), six_b());
    w.write_gmm("a.gmm", &a);
    w.write_gmm("b.gmm", &b);
    w.ok(&["fuse", "a.gmm", "b.gmm", "-o", "post.gmm", "--evidence-out", "ev.csv"])?;
    let r = lib(algebra::fuse(&a, &b))?;
    w.expect_gmm("post.gmm", &r.posterior)?;
    let ev = csv_values(&w.read("ev.csv")?)?;
    ensure(ev.point(0)[0] == r.evidence, || "evidence differs".into())
}

/// `mix` by raw shares, then `negate` and `fallback`.
pub fn mix_negate_fallback(w: &Workdir) -> Check {
    let (a, b) = (six_a(), six_b());
    w.write_gmm("a.gmm", &a);
    w.write_gmm("b.gmm", &b);
    w.ok(&["mix", "a.gmm", "b.gmm", "--shares", "60,40", "-o", "s.gmm"])?;
    let s = lib(algebra::mix(&[a, b], &lib(SourceWeights::from_shares(&[60.0, 40.0]))?))?;
    w.expect_gmm("s.gmm", &s)?;
    w.ok(&["negate", "s.gmm", "-o", "n.gmm"])?;
    let n = algebra::negate(&s);
    w.expect_gmm("n.gmm", &n)?;
    w.ok(&["fallback", "n.gmm", "-o", "f.gmm"])?;
    w.expect_gmm("f.gmm", &lib(n.gaussian_fallback())?)
}

/// `marginalize` and `condition` on a 2-D joint.
pub fn marginalize_and_condition(w: &Workdir) -> Check {
    let g = joint_2d();
    w.write_gmm("j.gmm", &g);
    w.ok(&["marginalize", "j.gmm", "--keep", "1", "-o", "y.gmm"])?;
    let blocks = lib(BlockIndex::with_x(vec![1], 2))?;
    w.expect_gmm("y.gmm", &lib(algebra::marginalize(&g, &blocks, Block::X))?)?;
    w.ok(&["condition", "j.gmm", "--given", "1", "--values", "-0.25", "-o", "c.gmm"])?;
    let blocks = lib(BlockIndex::new(vec![0], vec![1], 2))?;
    w.expect_gmm("c.gmm", &lib(algebra::condition(&g, &blocks, &[-0.25]))?)
}

/// `affine` with a non-square map, then `l2` against the library image.
pub fn affine_then_l2(w: &Workdir) -> Check {
    let g = joint_2d();
    w.write_gmm("j.gmm", &g);
    w.ok(&["affine", "j.gmm", "--matrix", "1,-2", "--offset", "0.5", "-o", "p.gmm"])?;
    let a = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
    let p = lib(g.affine(&a, &DVector::from_vec(vec![0.5])))?;
    w.expect_gmm("p.gmm", &p)?;
    w.write_gmm("a.gmm", &six_a());
    w.ok(&["l2", "p.gmm", "a.gmm", "-o", "d.csv"])?;
    let d = lib(algebra::l2_distance(&p, &six_a()))?;
    w.expect_bytes("d.csv", &render_table(&["l2_distance"], &[vec![d.into()]]))
}

/// `reduce` 6 → 2 with its report.
pub fn reduce_with_report(w: &Workdir) -> Check {
    let g = six_a();
    w.write_gmm("a.gmm", &g);
    w.ok(&["reduce", "a.gmm", "--k", "2", "--budget", "300", "-o", "r.gmm", "--report", "r.csv"])?;
    let r = lib(reduce(&g, 2, 300))?;
    w.expect_gmm("r.gmm", &r.reduced)?;
    let rep = csv_values(&w.read("r.csv")?)?;
    ensure(rep.point(0)[5] == r.l2_final, || "l2_final differs".into())?;
    ensure(rep.point(0)[2] == 17.0 && rep.point(0)[3] == 5.0, || "parameter counts".into())
}

/// `sample` draws and the histogram form agree with the seeded library
/// sampler.
pub fn sample_and_histogram(w: &Workdir) -> Check {
    let g = six_a();
    w.write_gmm("a.gmm", &g);
    w.ok(&["sample", "a.gmm", "--n", "500", "--seed", "11", "-o", "s.csv"])?;
    let batch = sample_gmm(&mut SeededStream::new(11), &g, 500);
    let labels = batch.labels.as_ref().unwrap();
    let rows: Vec<Vec<Cell>> = batch.values.iter().zip(labels).map(|(&v, &l)| vec![v.into(), l.into()]).collect();
    w.expect_bytes("s.csv", &render_table(&["x0", "component"], &rows))?;
    // Read back as data, the label column is dropped.
    let got = csv_values(&w.read("s.csv")?)?;
    ensure(got.dim() == 1 && got.values() == batch.values.as_slice(), || "draws read back differ".into())?;
    w.ok(&["sample", "a.gmm", "--n", "500", "--seed", "11", "--hist", "20", "--range", "-4", "6", "-o", "h.csv"])?;
    let bins = gmix::stats::histogram(&batch.values, -4.0, 6.0, 20);
    let rows: Vec<Vec<Cell>> = bins
        .into_iter()
        .map(|b| vec![b.lo.into(), b.hi.into(), b.count.into(), b.density.into()])
        .collect();
    w.expect_bytes("h.csv", &render_table(&["lo", "hi", "count", "density"], &rows))
}

fn two_cluster_csv(w: &Workdir, name: &str) -> Result<Dataset, String> {
    let g = joint_2d();
    let batch = sample_gmm(&mut SeededStream::new(5), &g, 400);
    let rows: Vec<Vec<Cell>> = batch.points().map(|p| vec![p[0].into(), p[1].into()]).collect();
    w.write(name, render_table(&["a", "b"], &rows));
    lib(Dataset::new(2, batch.values))
}

/// `fit` and `select-k` on CSV data.
pub fn fit_and_select(w: &Workdir) -> Check {
    let data = two_cluster_csv(w, "d.csv")?;
    w.ok(&["fit", "d.csv", "--k", "3", "--seed", "3", "-o", "f.gmm", "--trace", "t.csv"])?;
    let r = lib(em_fit(&data, &EmConfig::new(3, 3)))?;
    w.expect_gmm("f.gmm", &r.model)?;
    let trace = csv_values(&w.read("t.csv")?)?;
    ensure(trace.len() == r.loglik_trace.len(), || "trace length".into())?;
    w.ok(&["select-k", "d.csv", "--candidates", "1,2,3", "--seed", "3", "--restarts", "1", "-o", "s.gmm"])?;
    let mut cfg = EmConfig::new(1, 3);
    cfg.restarts = 1;
    let sel = lib(select_model(&data, &[1, 2, 3], &cfg))?;
    let best = sel.best_report(Criterion::Bic).ok_or("no best model")?;
    w.expect_gmm("s.gmm", &best.model)
}

/// `device-sim`, `device-fit` and `posterior` end to end.
pub fn device_pipeline(w: &Workdir) -> Check {
    w.ok(&[
        "device-sim", "--curve", "x-0.2*x^2", "--range", "0", "1", "--noise-var", "0.0025", "--n", "1000", "--seed",
        "7", "-o", "dev.csv",
    ])?;
    let curve = lib(CurveSpec::new(|x| x - 0.2 * (x * x), 0.0, 1.0, 0.0025))?;
    let data = lib(measurement::simulate_device(&curve, 1000, &mut SeededStream::new(7)))?;
    let got = csv_values(&w.read("dev.csv")?)?;
    ensure(got.values() == data.values(), || "simulated data differ".into())?;
    w.ok(&[
        "device-fit", "dev.csv", "--k", "10", "--seed", "7", "-o", "joint.gmm", "--range", "0", "1", "--stats",
        "st.csv", "--curve", "x-0.2*x^2", "--noise-var", "0.0025", "--norms", "norms.csv",
    ])?;
    let model = lib(measurement::fit_device(&data, &KChoice::Fixed(10), &EmConfig::new(1, 7)))?;
    w.expect_gmm("joint.gmm", &model.joint)?;
    let norms = lib(measurement::validation_norms(&model, &curve))?;
    let got = csv_values(&w.read("norms.csv")?)?;
    ensure(got.point(0) == [norms.mean_error, norms.variance_error], || "norms differ".into())?;
    let stats = lib(measurement::conditional_stats(&model, &measurement::linspace(0.0, 1.0, 201)))?;
    let got = csv_values(&w.read("st.csv")?)?;
    for (p, s) in got.points().zip(&stats) {
        ensure(p[1] == s.mean && p[2] == s.variance, || format!("stats at x = {} differ", s.x))?;
    }
    w.ok(&["posterior", "joint.gmm", "--y", "0.5", "-o", "post.gmm"])?;
    w.expect_gmm("post.gmm", &lib(measurement::posterior_from_observation(&model, &[0.5]))?)
}

/// `product` with a small Monte Carlo budget, then `qc` on the fit.
pub fn product_then_qc(w: &Workdir) -> Check {
    let gx = GmmParams::univariate(&[(0.6, 1.8, 0.01), (0.4, 2.3, 0.02)]).unwrap();
    let gy = GmmParams::univariate(&[(0.5, 0.8, 0.005), (0.5, 1.1, 0.01)]).unwrap();
    w.write_gmm("x.gmm", &gx);
    w.write_gmm("y.gmm", &gy);
    w.ok(&["product", "x.gmm", "y.gmm", "--n-mc", "4000", "--seed", "9", "-o", "z.gmm", "--samples", "z.csv"])?;
    let r = lib(measurement::propagate_product(&gx, &gy, 4000, None, &mut SeededStream::new(9)))?;
    w.expect_gmm("z.gmm", &r.fit.model)?;
    let got = csv_values(&w.read("z.csv")?)?;
    ensure(got.values() == r.samples.as_slice(), || "product samples differ".into())?;
    w.ok(&["qc", "z.gmm", "--lo", "1.5", "--hi", "2.5", "--n-mc", "20000", "--seed", "4", "-o", "q.csv"])?;
    let q = lib(QualityRegion::rectangle(vec![1.5], vec![2.5]))?;
    let e = lib(measurement::qc_probability(&r.fit.model, &q, 20000, &mut SeededStream::new(4)))?;
    let row = vec![
        e.estimate.into(),
        e.standard_error.into(),
        e.inside.into(),
        e.n.into(),
        e.closed_form.map_or(Cell::from(""), Cell::from),
    ];
    w.expect_bytes("q.csv", &render_table(&["estimate", "standard_error", "inside", "n", "closed_form"], &[row]))
}

pub type Scenario = fn(&Workdir) -> Check;

pub const SCENARIOS: [(&str, Scenario); 10] = [
    ("convolve_then_moments", convolve_then_moments),
    ("fuse_with_evidence", fuse_with_evidence),
    ("mix_negate_fallback", mix_negate_fallback),
    ("marginalize_and_condition", marginalize_and_condition),
    ("affine_then_l2", affine_then_l2),
    ("reduce_with_report", reduce_with_report),
    ("sample_and_histogram", sample_and_histogram),
    ("fit_and_select", fit_and_select),
    ("device_pipeline", device_pipeline),
    ("product_then_qc", product_then_qc),
];
