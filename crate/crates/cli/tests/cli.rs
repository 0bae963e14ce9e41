use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn graphscan(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphscan"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("GRAPHSCAN_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn verify_default_passes_and_writes_reports() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(dir.path(), &["verify", "--seed", "7"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report = json(&dir.path().join("verify.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["schema"], 1);
    assert_eq!(report["checks"].as_array().unwrap().len(), 12);
    let text = std::fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(text.contains("all checks passed"));
}

#[test]
fn tiny_tolerance_fails_but_still_reports() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(dir.path(), &["verify", "--tolerance", "1e-30"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("scan_equivalence"), "{stderr}");
    let report = json(&dir.path().join("verify.json"));
    assert_eq!(report["passed"], false);
    assert!(report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c["status"] == "fail"));
}

#[test]
fn single_token_grid_passes() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(dir.path(), &["verify", "--height", "1", "--width", "1"]);
    assert!(out.status.success());
}

#[test]
fn multi_head_verify_passes() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(dir.path(), &["verify", "--heads", "2", "--radius", "2"]);
    assert!(out.status.success());
}

#[test]
fn invalid_field_is_a_usage_error_naming_it() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(dir.path(), &["verify", "--height", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`height`"));
    let out = graphscan(dir.path(), &["verify", "--channels", "3", "--heads", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`heads`"));
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\nheight = 3\nwidth = 4\nradius = 2\n").unwrap();
    let out = graphscan(
        dir.path(),
        &["verify", "--config", cfg.to_str().unwrap(), "--width", "6"],
    );
    assert!(out.status.success());
    let report = json(&dir.path().join("verify.json"));
    assert_eq!(report["config"]["seed"], 5);
    assert_eq!(report["config"]["height"], 3);
    assert_eq!(report["config"]["width"], 6);
    assert_eq!(report["config"]["radius"], 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "hieght = 3\n").unwrap();
    let out = graphscan(dir.path(), &["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hieght"));
}

#[test]
fn env_var_sets_output_dir_when_flag_absent() {
    let dir = TempDir::new().unwrap();
    let target = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_graphscan"))
        .args(["backbone", "--variant", "small"])
        .env("GRAPHSCAN_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("backbone.json").exists());
}

#[test]
fn backbone_tiny_and_base_reports() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(dir.path(), &["backbone", "--variant", "tiny"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("56 x 56 x 80") && stdout.contains("7 x 7 x 512"));
    let report = json(&dir.path().join("backbone.json"));
    assert_eq!(report["target"]["within_band"], true);

    let out = graphscan(dir.path(), &["backbone", "--variant", "base"]);
    assert!(out.status.success());
    let report = json(&dir.path().join("backbone.json"));
    assert_eq!(report["target"]["within_band"], true);
    assert_eq!(report["stage_shapes"][3], serde_json::json!([7, 7, 640]));
}

#[test]
fn unknown_variant_lists_names() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(dir.path(), &["backbone", "--variant", "huge"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tiny") && stderr.contains("small") && stderr.contains("base"));
}

/// Per-layer parameter sum for one block, written out layer by layer.
fn block_params(c: usize, m: usize, n: usize, r: usize) -> usize {
    let d = c / 4;
    let slots = (2 * r + 1) * (2 * r + 1);
    let pos_dw = c * 9 + c;
    let ln1 = 2 * c;
    let proj_in = c * c + c;
    let dw = c * 9 + c;
    let wq = c * d;
    let wk = c * d;
    let wv = c * d;
    let wo = d * c;
    let a = c * n;
    let w_delta = c * c + c;
    let w_b = c * n;
    let w_c = c * n;
    let ln_inner = 2 * c;
    let proj_out = c * c + c;
    let bn = 2 * c;
    let fc1 = c * (m * c) + m * c;
    let ffn_dw = m * c * 9 + m * c;
    let fc2 = m * c * c + c;
    pos_dw
        + ln1
        + proj_in
        + dw
        + wq
        + wk
        + wv
        + wo
        + slots
        + a
        + w_delta
        + w_b
        + w_c
        + ln_inner
        + proj_out
        + bn
        + fc1
        + ffn_dw
        + fc2
}

#[test]
fn custom_backbone_matches_hand_sum() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(
        &cfg,
        "[backbone]\nchannels = [8, 16, 32, 64]\ndepths = [1, 1, 0, 0]\n\
         mlp_ratios = [2, 3, 1, 1]\nradii = [1, 2, 1, 1]\nd_state = 2\n",
    )
    .unwrap();
    let out = graphscan(
        dir.path(),
        &[
            "backbone",
            "--config",
            cfg.to_str().unwrap(),
            "--resolution",
            "64",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&dir.path().join("backbone.json"));
    assert_eq!(report["variant"], "custom");

    let stem = (27 * 4 + 4) + 2 * 4 + (9 * 4 * 8 + 8) + 2 * 8;
    let downs =
        (9 * 8 * 16 + 16 + 2 * 16) + (9 * 16 * 32 + 32 + 2 * 32) + (9 * 32 * 64 + 64 + 2 * 64);
    let blocks = block_params(8, 2, 2, 1) + block_params(16, 3, 2, 2);
    let final_norm = 2 * 64;
    assert_eq!(report["params"], stem + downs + blocks + final_norm);
}

#[test]
fn field_figures_match_golden_files() {
    let dir = TempDir::new().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for pattern in ["checker", "gradient", "impulse"] {
        let out = graphscan(dir.path(), &["field", "--seed", "0", "--pattern", pattern]);
        assert!(out.status.success());
        for suffix in ["magnitude.pgm", "direction.ppm", "path.svg"] {
            let name = format!("field_{pattern}_random_{suffix}");
            let got = std::fs::read(dir.path().join(&name)).unwrap();
            let want = std::fs::read(golden.join(&name)).unwrap();
            assert!(got == want, "{name} differs from golden");
        }
    }
}

#[test]
fn zero_weights_give_blank_interior() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(
        dir.path(),
        &["field", "--weights", "zero", "--pattern", "gradient"],
    );
    assert!(out.status.success());
    let pgm =
        std::fs::read_to_string(dir.path().join("field_gradient_zero_magnitude.pgm")).unwrap();
    let rows: Vec<Vec<u32>> = pgm
        .lines()
        .skip(3)
        .map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    // 8×8 tokens at 8 pixels each; interior tokens are rows/cols 1..7
    for row in &rows[8..56] {
        assert!(row[8..56].iter().all(|&v| v == 0));
    }
    assert!(rows[0].iter().any(|&v| v > 0));
}

#[test]
fn bias_spike_shifts_path_right() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(
        dir.path(),
        &["field", "--weights", "bias-right", "--pattern", "impulse"],
    );
    assert!(out.status.success());
    let svg =
        std::fs::read_to_string(dir.path().join("field_impulse_bias-right_path.svg")).unwrap();
    let points = svg
        .split("points=\"")
        .nth(1)
        .unwrap()
        .split('"')
        .next()
        .unwrap();
    let first: Vec<f64> = points
        .split(' ')
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    // token (0,0) sits at pixel (4,4); its expected position moves right
    assert!(first[0] > 4.0 && (first[1] - 4.0).abs() < 0.5);
    assert!(svg.contains("class=\"start\"") && svg.contains("class=\"end\""));
}

#[test]
fn field_reads_json_grid() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("grid.json");
    let data: Vec<String> = (0..2 * 3 * 2)
        .map(|k| format!("{}", k as f64 * 0.1))
        .collect();
    std::fs::write(
        &input,
        format!(
            "{{\"height\":2,\"width\":3,\"channels\":2,\"data\":[{}]}}",
            data.join(",")
        ),
    )
    .unwrap();
    let out = graphscan(dir.path(), &["field", "--input", input.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("field_input_random_path.svg").exists());
}

#[test]
fn unreadable_input_names_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.json");
    let out = graphscan(dir.path(), &["field", "--input", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        "{\"height\":2,\"width\":2,\"channels\":1,\"data\":[1]}",
    )
    .unwrap();
    let out = graphscan(dir.path(), &["field", "--input", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_smoke_and_csv_shape() {
    let dir = TempDir::new().unwrap();
    let out = graphscan(
        dir.path(),
        &["bench", "--sides", "1,4", "--min-time", "0.001"],
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "height,width,tokens,radius,slots,repeats,seconds,ns_per_token"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1,1,1,9,"));
}

#[test]
fn bench_cost_tracks_window_size() {
    use graphscan_cli::bench::time_grids;
    use graphscan_cli::config::RunConfig;
    let cfg = RunConfig::default();
    let r1 = time_grids(&cfg, &[(48, 48)], 1, 0.02).unwrap()[0].seconds;
    let r2 = time_grids(&cfg, &[(48, 48)], 2, 0.02).unwrap()[0].seconds;
    let ratio = r2 / r1;
    let expected = 25.0 / 9.0;
    assert!((ratio / expected - 1.0).abs() <= 0.4, "ratio {ratio}");
}

#[test]
fn outputs_are_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        assert!(graphscan(
            dir.path(),
            &["field", "--seed", "11", "--pattern", "checker"]
        )
        .status
        .success());
    }
    for suffix in ["magnitude.pgm", "direction.ppm", "path.svg"] {
        let name = format!("field_checker_random_{suffix}");
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap()
        );
    }
}
