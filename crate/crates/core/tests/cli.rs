use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hajek::io::Report;
use hajek::randomize::{assign_within_strata, Seed};
use hajek::simulate::{gen_individual_population, ClusterDesignConfig, COVARIATE_NAMES};

fn hajek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hajek")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn estimate_bundled_dataset() {
    let o = hajek(&["estimate", "--dataset", "osnap", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = Report::from_json(&stdout(&o)).unwrap();
    assert!((report.estimates.hajek.tau - 0.0600314).abs() < 1e-6);
    assert_eq!(report.provenance.seed, Some(7));
    assert_eq!(report.provenance.input_digest.len(), 64);
    let wald = report.intervals.iter().find(|i| i.method == "wald_t").unwrap();
    assert_eq!(wald.df, Some(18));
}

#[test]
fn estimate_csv_output() {
    let o = hajek(&["estimate", "--dataset", "osnap", "--csv"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("section,name,value\n"));
    assert!(!text.contains('\r'));
}

#[test]
fn missing_input_is_a_usage_error() {
    let o = hajek(&["estimate", "--input", "/nonexistent/data.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}

#[test]
fn unknown_dataset_is_a_usage_error() {
    assert_eq!(hajek(&["estimate", "--dataset", "nope"]).status.code(), Some(2));
}

#[test]
fn malformed_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "stratum,cluster,weight,z,y\np1,a,10,1,NaN\np1,b,12,0,0.5\n").unwrap();
    let o = hajek(&["estimate", "--input", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn enumerate_single_pair() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pair.csv");
    fs::write(&path, "stratum,cluster,weight,y0,y1\np,a,10,1.0,2.0\np,b,30,0.0,0.5\n").unwrap();
    let o = hajek(&["enumerate", "--input", path.to_str().unwrap(), "--potential"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "assignment,ha,ikn,fe,ht");
    assert_eq!(lines.len(), 1 + 2 + 5);
    assert!(lines[1..3].iter().all(|l| l.starts_with("10,") || l.starts_with("01,")));
    let truth: Vec<&str> = lines.iter().find(|l| l.starts_with("truth,")).unwrap().split(',').collect();
    // SATE = (10·1 + 30·0.5) / 40
    assert!((truth[1].parse::<f64>().unwrap() - 0.625).abs() < 1e-12);
}

#[test]
fn enumeration_cap_is_enforced() {
    let o = hajek(&["enumerate", "--dataset", "osnap", "--cap", "1000"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hajek(&["enumerate", "--dataset", "osnap", "--cap", "1024"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1 + 1024 + 5);
}

fn write_individual(path: &Path) {
    let pop = gen_individual_population(&ClusterDesignConfig {
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let layouts = pop.clusters().balanced_layouts().unwrap();
    let data = pop.observe(&assign_within_strata(&layouts, Seed(11), 0)).unwrap();
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["stratum", "cluster", "z", "y"];
    header.extend(COVARIATE_NAMES);
    w.write_record(&header).unwrap();
    for r in data.records() {
        let mut rec = vec![
            r.stratum.to_string(),
            r.cluster.to_string(),
            u8::from(r.treated).to_string(),
            r.y.to_string(),
        ];
        rec.extend(r.x.iter().map(|x| x.to_string()));
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn individual_estimate_uses_covariate_df() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("classes.csv");
    write_individual(&path);
    let p = path.to_str().unwrap();
    let o = hajek(&["estimate", "--input", p, "--individual", "--covariates", "pre_score,urban"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = Report::from_json(&stdout(&o)).unwrap();
    assert!(report.estimates.adjusted.is_some());
    let wald = report.intervals.iter().find(|i| i.method == "wald_t_adj").unwrap();
    assert_eq!(wald.df, Some(27));

    let all = hajek(&["estimate", "--input", p, "--individual"]);
    assert_eq!(stdout(&all), stdout(&o), "default covariates are the extra columns");

    let missing = hajek(&["estimate", "--input", p, "--individual", "--covariates", "age"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn simulate_writes_both_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "seed = 4\nn_mc = 50\n\n[[scenario]]\nname = \"osnap\"\nstudy = \"osnap\"\nmode = \"exact\"\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = hajek(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"seed\": 4"));
    assert!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count() > 1);
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "[[scenario]]\nname = \"x\"\nstudy = \"variance\"\ncolour = 1\n").unwrap();
    let o = hajek(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = hajek(&["simulate", "--preset", "figure9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
