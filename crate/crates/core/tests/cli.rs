use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn wsckit<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_wsckit")).args(args).output().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn baseline_args() -> Vec<String> {
    vec![
        "--vocab".into(),
        fixture("vocab.txt").display().to_string(),
        "--fit-corpus".into(),
        fixture("corpus50.pos").display().to_string(),
        "--fit-format".into(),
        "pretagged".into(),
    ]
}

fn generate(dir: &Path) -> PathBuf {
    let out = dir.join("d.ndl");
    let o = wsckit([
        "generate",
        "--format",
        "pretagged",
        "--corpus",
        path_str(&fixture("corpus50.pos")),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn usage_errors_exit_1() {
    let o = wsckit(["generate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = wsckit(["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let out = dir.path().join("s.ndl");
    let o = wsckit([
        "downsample",
        "--rate",
        "0.5",
        "--input",
        path_str(&data),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = wsckit([
        "downsample",
        "--rate",
        "0.5",
        "--seed",
        "1",
        "--input",
        "/no/such/file",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = wsckit([
        "downsample",
        "--rate",
        "1.5",
        "--seed",
        "1",
        "--input",
        path_str(&data),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = wsckit([
        "downsample",
        "--rate",
        "0.5",
        "--seed",
        "1",
        "--input",
        path_str(&data),
        "--out",
        "/no/such/dir/x",
    ]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(wsckit(["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.pos");
    std::fs::write(&corpus, "The/DT dog/NN ran/VBD\n\nbroken token here\n").unwrap();
    let out = dir.path().join("d.ndl");
    let o = wsckit([
        "generate",
        "--format",
        "pretagged",
        "--corpus",
        path_str(&corpus),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":3:"), "{}", stderr(&o));
    assert!(!out.exists());

    let data = dir.path().join("data.ndl");
    std::fs::write(&data, "{\"id\":\"a\"}\n").unwrap();
    let o = wsckit([
        "downsample",
        "--rate",
        "0.5",
        "--seed",
        "1",
        "--input",
        path_str(&data),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":1:"), "{}", stderr(&o));
}

#[test]
fn scorer_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let out = dir.path().join("scores.ndl");
    for endpoint in ["cmd:/no/such/program", "tcp://127.0.0.1:1"] {
        let mut args = vec![
            "score".to_string(),
            "--input".into(),
            path_str(&data).into(),
            "--out".into(),
            path_str(&out).into(),
        ];
        args.extend(["--scorer".into(), endpoint.into(), "--timeout".into(), "5".into()]);
        args.extend(baseline_args());
        let o = wsckit(&args);
        assert_eq!(o.status.code(), Some(3), "{endpoint}: {}", stderr(&o));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let golden = read(&fixture("golden50.jsonl"));
    assert_eq!(read(&data), golden);
    let manifest = read(&dir.path().join("d.ndl.manifest.json"));
    generate(dir.path());
    assert_eq!(read(&data), golden);
    assert_eq!(read(&dir.path().join("d.ndl.manifest.json")), manifest);

    // worker count does not change output or manifest
    let out = dir.path().join("s.ndl");
    let mut seen = Vec::new();
    for workers in ["1", "4", "1"] {
        let o = wsckit([
            "--workers",
            workers,
            "downsample",
            "--rate",
            "0.5",
            "--seed",
            "7",
            "--input",
            path_str(&data),
            "--out",
            path_str(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        seen.push((read(&out), read(&dir.path().join("s.ndl.manifest.json"))));
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));

    let filtered = dir.path().join("f.ndl");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut args = vec![
            "filter".to_string(),
            "--input".into(),
            path_str(&data).into(),
            "--out".into(),
            path_str(&filtered).into(),
        ];
        args.extend([
            "--v-min".into(),
            "-1".into(),
            "--v-max".into(),
            "1".into(),
            "--min-whole-word-frac".into(),
            "0.5".into(),
        ]);
        args.extend(baseline_args());
        let o = wsckit(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push((
            read(&filtered),
            read(&dir.path().join("f.ndl.stats.json")),
            read(&dir.path().join("f.ndl.manifest.json")),
        ));
    }
    assert_eq!(runs[0], runs[1]);
    let stats: serde_json::Value = serde_json::from_slice(&runs[0].1).unwrap();
    let s = &stats["stats"];
    assert_eq!(s["total"], 45);
    assert_eq!(
        s["kept"].as_u64().unwrap() + s["rejected"].as_u64().unwrap() + s["errored"].as_u64().unwrap(),
        45
    );
    let manifest: serde_json::Value = serde_json::from_slice(&runs[0].2).unwrap();
    assert_eq!(manifest["subcommand"], "filter");
    assert_eq!(manifest["config"]["v-min"], -1.0);
    assert!(manifest["scorer_digest"].is_string());
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 3);
}

#[test]
fn downsample_at_small_rate() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let out = dir.path().join("s.ndl");
    let o = wsckit([
        "downsample",
        "--rate",
        "0.0185",
        "--seed",
        "7",
        "--input",
        path_str(&data),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("s.ndl.manifest.json"))).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["rate"], 0.0185);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 3\n[downsample]\nrate = 0.5\ninput = {:?}\nout = {:?}\n",
            path_str(&data),
            path_str(&dir.path().join("a.ndl"))
        ),
    )
    .unwrap();
    let o = wsckit(["--config", path_str(&cfg), "downsample"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = wsckit([
        "downsample",
        "--config",
        path_str(&cfg),
        "--seed",
        "4",
        "--out",
        path_str(&dir.path().join("b.ndl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = wsckit([
        "downsample",
        "--rate",
        "0.5",
        "--seed",
        "3",
        "--input",
        path_str(&data),
        "--out",
        path_str(&dir.path().join("c.ndl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&dir.path().join("a.ndl")), read(&dir.path().join("c.ndl")));
    assert_ne!(read(&dir.path().join("a.ndl")), read(&dir.path().join("b.ndl")));
    let m: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("b.ndl.manifest.json"))).unwrap();
    assert_eq!(m["seed"], 4);

    std::fs::write(&cfg, "[downsample]\nspeed = 1\n").unwrap();
    assert_eq!(
        wsckit(["--config", path_str(&cfg), "downsample"]).status.code(),
        Some(1)
    );
}

#[test]
fn dataset_transforms() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());

    let split = dir.path().join("split.ndl");
    let o = wsckit([
        "split-pairs",
        "--mode",
        "no-pairs",
        "--seed",
        "1",
        "--input",
        path_str(&fixture("wsc20.jsonl")),
        "--out",
        path_str(&split),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(read(&split)).unwrap().lines().count(), 10);

    let dedup = dir.path().join("dedup.ndl");
    let o = wsckit([
        "dedup",
        "--input",
        path_str(&data),
        "--eval",
        path_str(&fixture("golden50.jsonl")),
        "--out",
        path_str(&dedup),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(read(&dedup).is_empty());
    assert!(stderr(&o).contains("removed 45 of 45"), "{}", stderr(&o));

    let sample = dir.path().join("audit.ndl");
    let o = wsckit([
        "audit-sample",
        "--size",
        "5",
        "--seed",
        "2",
        "--input",
        path_str(&data),
        "--out",
        path_str(&sample),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ids: Vec<String> = String::from_utf8(read(&sample))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids.len(), 5);

    let labels = dir.path().join("labels.tsv");
    let cats = ["hard", "easy", "hard", "noise", "unsolvable"];
    let text: String = ids.iter().zip(cats).map(|(id, c)| format!("{id}\t{c}\n")).collect();
    std::fs::write(&labels, text).unwrap();
    let tally = dir.path().join("tally.json");
    let o = wsckit(["audit-tally", "--input", path_str(&labels), "--out", path_str(&tally)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t: serde_json::Value = serde_json::from_slice(&read(&tally)).unwrap();
    assert_eq!(t["counts"]["hard"], 2);
    assert_eq!(t["percentages"]["hard"], 40.0);
}

#[test]
fn score_and_evaluate_with_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.ndl");
    let mut args = vec![
        "score".to_string(),
        "--input".into(),
        path_str(&fixture("wsc20.jsonl")).into(),
        "--out".into(),
        path_str(&scores).into(),
    ];
    args.extend(baseline_args());
    let o = wsckit(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(read(&scores)).unwrap();
    assert_eq!(text.lines().count(), 20);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["scores"].as_array().unwrap().len(), 2);
    assert_eq!(first["pair_losses"].as_array().unwrap().len(), 1);

    let report = dir.path().join("wsc.json");
    let mut args = vec![
        "eval-wsc".to_string(),
        "--input".into(),
        path_str(&fixture("wsc20.jsonl")).into(),
        "--annotations".into(),
        path_str(&fixture("wsc20.annotations.jsonl")).into(),
        "--wnli".into(),
        path_str(&fixture("wnli.tsv")).into(),
        "--out".into(),
        path_str(&report).into(),
        "--label".into(),
        "unigram".into(),
    ];
    args.extend(baseline_args());
    let o = wsckit(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("model"), "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("unigram"), "{table}");
    let r: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(r["metrics"]["wsc"]["overall"]["total"], 20);
    assert_eq!(r["metrics"]["wnli"]["score"]["total"], 6);
    assert_eq!(r["predictions"].as_array().unwrap().len(), 20);

    let wnli = dir.path().join("wnli.json");
    let mut args = vec![
        "eval-wnli".to_string(),
        "--exclude-skipped".into(),
        "--input".into(),
        path_str(&fixture("wnli.tsv")).into(),
        "--out".into(),
        path_str(&wnli).into(),
    ];
    args.extend(baseline_args());
    let o = wsckit(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("row 5 skipped"), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&read(&wnli)).unwrap();
    assert_eq!(r["wnli"]["score"]["total"], 5);
}

#[test]
fn remote_scorer_with_replay_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let endpoint = format!(
        "cmd:{} serve-baseline --fit-format pretagged --vocab {} --fit-corpus {}",
        env!("CARGO_BIN_EXE_wsckit"),
        fixture("vocab.txt").display(),
        fixture("corpus50.pos").display()
    );
    let local = dir.path().join("local.ndl");
    let mut args = vec![
        "score".to_string(),
        "--input".into(),
        path_str(&fixture("golden50.jsonl")).into(),
        "--out".into(),
        path_str(&local).into(),
    ];
    args.extend(baseline_args());
    assert!(wsckit(&args).status.success());

    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("remote{run}.ndl"));
        let mut args = vec![
            "score".to_string(),
            "--input".into(),
            path_str(&fixture("golden50.jsonl")).into(),
            "--out".into(),
            path_str(&out).into(),
        ];
        args.extend([
            "--scorer".into(),
            endpoint.clone(),
            "--replay-cache".into(),
            path_str(&cache).into(),
        ]);
        args.extend(baseline_args());
        let o = wsckit(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(read(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], read(&local));
    assert!(!read(&cache).is_empty());
}

#[test]
fn serve_baseline_over_tcp() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_wsckit"))
        .args(["serve-baseline", "--listen", "127.0.0.1:0"])
        .args(baseline_args())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("{line}"))
        .to_string();

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scores.ndl");
    let mut args = vec![
        "score".to_string(),
        "--input".into(),
        path_str(&fixture("wsc20.jsonl")).into(),
        "--out".into(),
        path_str(&out).into(),
    ];
    args.extend(["--scorer".into(), addr]);
    args.extend(baseline_args());
    let o = wsckit(&args);
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    let local = dir.path().join("local.ndl");
    let mut args = vec![
        "score".to_string(),
        "--input".into(),
        path_str(&fixture("wsc20.jsonl")).into(),
        "--out".into(),
        path_str(&local).into(),
    ];
    args.extend(baseline_args());
    assert!(wsckit(&args).status.success());
    assert_eq!(read(&out), read(&local));
}
