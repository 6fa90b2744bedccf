mod golden;

use golden::{six_a, Workdir};
use gmix_cli::manifest::RunManifest;

macro_rules! scenario_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                let w = Workdir::new();
                golden::$name(&w).unwrap();
            }
        )*
    };
}

scenario_tests!(
    convolve_then_moments,
    fuse_with_evidence,
    mix_negate_fallback,
    marginalize_and_condition,
    affine_then_l2,
    reduce_with_report,
    sample_and_histogram,
    fit_and_select,
    device_pipeline,
    product_then_qc,
);

#[test]
fn document_goes_to_stdout_without_output_flag() {
    let w = Workdir::new();
    w.write_gmm("a.gmm", &six_a());
    let out = w.ok(&["negate", "a.gmm"]).unwrap();
    let back = gmix_cli::GmmDocument::parse(&String::from_utf8(out).unwrap()).unwrap();
    assert_eq!(back.params, gmix::algebra::negate(&six_a()));
    assert!(!w.path().join("a.gmm.manifest.json").exists());
}

fn exit_code(w: &Workdir, args: &[&str]) -> i32 {
    w.run(args).status.code().expect("exit code")
}

#[test]
fn exit_codes_follow_error_categories() {
    let w = Workdir::new();
    w.write_gmm("a.gmm", &six_a());
    w.write_gmm("wide.gmm", &gmix::GmmParams::univariate(&[(1.0, 1e6, 1e-4)]).unwrap());
    w.write(
        "bad.gmm",
        "format_version gmm/1\ndim 1\ncomponents 1\ncomponent 0\nweight oops\nmean 0\ncov 1\n",
    );
    w.write(
        "unnormalized.gmm",
        "format_version gmm/1\ndim 1\ncomponents 1\ncomponent 0\nweight 0.5\nmean 0\ncov 1\n",
    );

    assert_eq!(exit_code(&w, &["moments", "a.gmm"]), 0);
    assert_eq!(exit_code(&w, &["reduce", "a.gmm", "--k", "9"]), 2);
    assert_eq!(exit_code(&w, &["moments", "unnormalized.gmm"]), 2);
    assert_eq!(exit_code(&w, &["moments", "bad.gmm"]), 3);
    assert_eq!(exit_code(&w, &["no-such-command"]), 3);
    assert_eq!(exit_code(&w, &["sample", "a.gmm", "--n", "3", "-o", "s.csv"]), 3);
    assert_eq!(exit_code(&w, &["fuse", "a.gmm", "wide.gmm"]), 4);
    assert_eq!(exit_code(&w, &["moments", "missing.gmm"]), 5);
    assert_eq!(exit_code(&w, &["--help"]), 0);
}

#[test]
fn error_message_names_category_line_and_field() {
    let w = Workdir::new();
    w.write(
        "bad.gmm",
        "format_version gmm/1\ndim 1\ncomponents 1\ncomponent 0\nweight oops\nmean 0\ncov 1\n",
    );
    let out = w.run(&["moments", "bad.gmm"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("gmix: error[parse]: bad.gmm: line 5, field `weight`"), "{err}");
}

#[test]
fn stochastic_outputs_replay_bit_exactly() {
    let w = Workdir::new();
    w.write_gmm("a.gmm", &six_a());
    w.ok(&["sample", "a.gmm", "--n", "2000", "--seed", "42", "-o", "s.csv"]).unwrap();
    let m = RunManifest::read(&w.path().join("s.csv.manifest.json")).unwrap();
    assert_eq!(m.command, "sample");
    assert_eq!(m.seed, Some(42));
    assert_eq!(m.inputs.len(), 1);
    assert_eq!(m.outputs[0].path, "s.csv");
    let out = w.ok(&["replay", "s.csv.manifest.json"]).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("replay ok"));

    // A second run with the same seed writes identical bytes.
    let first = w.read("s.csv").unwrap();
    w.ok(&["sample", "a.gmm", "--n", "2000", "--seed", "42", "-o", "s2.csv", "--no-manifest"]).unwrap();
    assert_eq!(first, w.read("s2.csv").unwrap());
    assert!(!w.path().join("s2.csv.manifest.json").exists());
}

#[test]
fn replay_detects_changed_input() {
    let w = Workdir::new();
    w.write_gmm("a.gmm", &six_a());
    w.ok(&["fit", "a.gmm", "--k", "1", "--seed", "1", "-o", "f.gmm"]).unwrap_err();
    let data = "x\n1\n2\n3\n4\n5\n";
    w.write("d.csv", data);
    w.ok(&["fit", "d.csv", "--k", "1", "--seed", "1", "-o", "f.gmm", "--manifest", "run.json"]).unwrap();
    w.ok(&["replay", "run.json"]).unwrap();
    w.write("d.csv", "x\n1\n2\n3\n4\n6\n");
    assert_eq!(exit_code(&w, &["replay", "run.json"]), 2);
}

#[test]
fn replay_detects_changed_output_record() {
    let w = Workdir::new();
    w.write_gmm("a.gmm", &six_a());
    w.ok(&["qc", "a.gmm", "--lo", "-1", "--hi", "1", "--n-mc", "1000", "--seed", "3", "-o", "q.csv"]).unwrap();
    let path = w.path().join("q.csv.manifest.json");
    let mut m = RunManifest::read(&path).unwrap();
    m.outputs[0].sha256 = "0".repeat(64);
    std::fs::write(&path, m.to_json()).unwrap();
    assert_eq!(exit_code(&w, &["replay", "q.csv.manifest.json"]), 4);
}

#[test]
fn histogram_overlay_matches_pdf() {
    let w = Workdir::new();
    let g = six_a();
    w.write_gmm("g.gmm", &g);
    w.ok(&["sample", "g.gmm", "--n", "100000", "--seed", "1", "--hist", "200", "--range", "-4", "6", "-o", "h.csv"])
        .unwrap();
    w.ok(&["pdf", "g.gmm", "--range", "-4", "6", "--points", "201", "-o", "p.csv"]).unwrap();
    let (_, hist) = gmix_cli::csvio::parse_points(&w.read("h.csv").unwrap()).unwrap();
    let (_, pdf) = gmix_cli::csvio::parse_points(&w.read("p.csv").unwrap()).unwrap();
    // Bin edges coincide with the pdf grid, so the empirical CDF at each
    // edge can be compared with the cdf column.
    let n: f64 = hist.points().map(|b| b[2]).sum();
    let mut acc = 0.0;
    let mut ks: f64 = 0.0;
    for (i, b) in hist.points().enumerate() {
        acc += b[2];
        let edge = pdf.point(i + 1);
        assert!((edge[0] - b[1]).abs() < 1e-12);
        ks = ks.max((acc / 100000.0 - edge[2]).abs());
    }
    assert!(n <= 100000.0);
    assert!(ks < 0.005, "KS {ks}");
}
