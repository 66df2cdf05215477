use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condist::store::{write_store, ConceptId, StoreBuilder, Vocabulary};
use condist::synth::{property_fixture, PropertyFixtureConfig};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn condist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condist"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = condist(args);
    assert!(
        out.status.success(),
        "condist {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_of(p: &Path) -> String {
    let mut name = p.as_os_str().to_owned();
    name.push(".manifest");
    std::fs::read_to_string(name).expect("manifest written")
}

#[test]
fn no_subcommand_prints_usage_and_exits_2() {
    let out = condist(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
}

#[test]
fn mine_neigh_matches_golden_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.pairs");
    let store = data("toy.cmvs");
    ok(&[
        "mine-neigh",
        "--store",
        s(&store),
        "--k",
        "5",
        "--theta",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(data("toy_k5_theta0.5.pairs")).unwrap()
    );
    let manifest = manifest_of(&out);
    assert!(manifest.contains("command=mine-neigh\n"));
    assert!(manifest.contains("config.k=5\n"));
    assert!(manifest.contains("config.theta=1/2\n"));
    assert!(manifest.contains(
        "input.store.sha256=4078f1fb7a300ac08ab6d643eff6ed274ad38b9d97f733fe22b2784e8bf63b5b\n"
    ));
    assert!(!manifest.to_lowercase().contains("time"));
}

#[test]
fn neighbour_cache_gives_the_same_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("toy.knn");
    let store = data("toy.cmvs");
    let first = dir.path().join("a.pairs");
    let second = dir.path().join("b.pairs");
    // cache built with a larger k, then reused with a smaller one
    ok(&[
        "mine-neigh",
        "--store",
        s(&store),
        "--k",
        "8",
        "--neighbors-cache",
        s(&cache),
        "--out",
        s(&first),
    ]);
    assert!(cache.exists());
    ok(&[
        "mine-neigh",
        "--store",
        s(&store),
        "--k",
        "5",
        "--neighbors-cache",
        s(&cache),
        "--out",
        s(&second),
    ]);
    assert_eq!(
        std::fs::read(&second).unwrap(),
        std::fs::read(data("toy_k5_theta0.5.pairs")).unwrap()
    );
    assert!(manifest_of(&second).contains("input.neighbors-cache="));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let store = data("toy.cmvs");

    let missing = condist(&["filter", "--store", "/no/such/store", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: reading store"));

    let bad_flag = condist(&[
        "filter",
        "--store",
        s(&store),
        "--k",
        "many",
        "--out",
        s(&out),
    ]);
    assert_eq!(bad_flag.status.code(), Some(2));

    let bad_value = condist(&["filter", "--store", s(&store), "--k", "0", "--out", s(&out)]);
    assert_eq!(bad_value.status.code(), Some(2));

    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[filter]\nkay = 3\n").unwrap();
    let bad_key = condist(&[
        "filter",
        "--config",
        s(&config),
        "--store",
        s(&store),
        "--out",
        s(&out),
    ]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("kay"));

    let garbage = dir.path().join("garbage");
    std::fs::write(&garbage, b"not a store").unwrap();
    let corrupt = condist(&["filter", "--store", s(&garbage), "--out", s(&out)]);
    assert_eq!(corrupt.status.code(), Some(1));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let store = data("toy.cmvs");
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "seed = 9\n[mine-neigh]\ntheta = 0.8\nk = 3\n").unwrap();

    let from_file = dir.path().join("file.pairs");
    ok(&[
        "mine-neigh",
        "--config",
        s(&config),
        "--store",
        s(&store),
        "--out",
        s(&from_file),
    ]);
    let manifest = manifest_of(&from_file);
    assert!(manifest.contains("config.seed=9\n"));
    assert!(manifest.contains("config.k=3\n"));
    assert!(manifest.contains("config.theta=4/5\n"));

    let from_flags = dir.path().join("flags.pairs");
    ok(&[
        "mine-neigh",
        "--config",
        s(&config),
        "--store",
        s(&store),
        "--k",
        "5",
        "--theta",
        "1/2",
        "--seed",
        "1",
        "--out",
        s(&from_flags),
    ]);
    assert_eq!(
        std::fs::read(&from_flags).unwrap(),
        std::fs::read(data("toy_k5_theta0.5.pairs")).unwrap()
    );
    assert!(manifest_of(&from_flags).contains("config.seed=1\n"));
}

/// Synthetic store whose concepts fall into four classes, plus matching
/// dataset and gold files.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let fx = property_fixture(&PropertyFixtureConfig::default());
    let store = dir.join("fixture.cmvs");
    write_store(&fx.store, &store).unwrap();
    let mut classes = String::new();
    for c in fx.store.vocab().ids() {
        let word = fx.store.vocab().word(c).unwrap();
        let first = fx.store.mentions_of(c).unwrap()[0];
        writeln!(classes, "{word}\tp{}", fx.record_property[first as usize]).unwrap();
    }
    let dataset = dir.join("classes.tsv");
    std::fs::write(&dataset, classes).unwrap();
    (store, dataset)
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (store, dataset) = fixture(d);
    let p = |name: &str| d.join(name);
    let t = ["--threads", "1", "--seed", "3"];
    let run = |args: &[&str]| ok(&[args, &t[..]].concat());

    run(&[
        "filter",
        "--store",
        s(&store),
        "--k",
        "5",
        "--out",
        s(&p("kept.txt")),
    ]);
    run(&[
        "mine-neigh",
        "--store",
        s(&store),
        "--k",
        "5",
        "--theta",
        "0.5",
        "--out",
        s(&p("neigh.pairs")),
    ]);
    run(&[
        "train-proj",
        "--store",
        s(&store),
        "--pairs",
        s(&p("neigh.pairs")),
        "--out-dim",
        "16",
        "--lr",
        "0.01",
        "--max-epochs",
        "15",
        "--batch-pairs",
        "512",
        "--out",
        s(&p("proj.cprj")),
    ]);
    run(&[
        "project",
        "--store",
        s(&store),
        "--model",
        s(&p("proj.cprj")),
        "--out",
        s(&p("tuned.cmvs")),
    ]);
    run(&[
        "aggregate",
        "--store",
        s(&p("tuned.cmvs")),
        "--kept",
        s(&p("kept.txt")),
        "--out",
        s(&p("tuned.cemb")),
    ]);
    run(&[
        "aggregate",
        "--store",
        s(&store),
        "--format",
        "text",
        "--out",
        s(&p("base.txt")),
    ]);
    run(&[
        "eval-clf",
        "--table",
        s(&p("tuned.cemb")),
        "--dataset",
        s(&dataset),
        "--out",
        s(&p("clf.tsv")),
    ]);
    run(&[
        "eval-clf",
        "--table",
        s(&p("base.txt")),
        "--dataset",
        s(&dataset),
        "--balanced",
        "--out",
        s(&p("clf_base.tsv")),
    ]);
    run(&[
        "eval-mention-clf",
        "--store",
        s(&store),
        "--dataset",
        s(&dataset),
        "--max-epochs",
        "5",
        "--out",
        s(&p("mention.tsv")),
    ]);
    run(&[
        "eval-cluster",
        "--table",
        s(&p("tuned.cemb")),
        "--gold",
        s(&dataset),
        "--out",
        s(&p("cluster.txt")),
    ]);
    run(&[
        "neighbors",
        "--table",
        s(&p("tuned.cemb")),
        "--word",
        "concept0",
        "--word",
        "concept1",
        "--k",
        "3",
        "--out",
        s(&p("nn.tsv")),
    ]);
    run(&[
        "anisotropy",
        "--table",
        s(&p("tuned.cemb")),
        "--bins",
        "20",
        "--out",
        s(&p("hist.txt")),
    ]);
    run(&[
        "neighbor-shift",
        "--base",
        s(&store),
        "--tuned",
        s(&p("tuned.cmvs")),
        "--top-in",
        "5",
        "--top-out",
        "50",
        "--out",
        s(&p("shift.tsv")),
    ]);

    let metrics = std::fs::read_to_string(p("clf.tsv")).unwrap();
    assert!(metrics.starts_with("class\tprecision\trecall\tf1\n"));
    assert!(metrics.lines().any(|l| l.starts_with("MACRO\t")));
    assert_eq!(metrics.lines().count(), 6);
    assert!(manifest_of(&p("clf.tsv")).contains("result.macro-f1="));
    let cluster = std::fs::read_to_string(p("cluster.txt")).unwrap();
    assert_eq!(
        cluster
            .lines()
            .filter(|l| l.starts_with(char::is_numeric))
            .count(),
        10
    );
    assert_eq!(
        std::fs::read_to_string(p("nn.tsv"))
            .unwrap()
            .lines()
            .count(),
        7
    );
    let log = std::fs::read_to_string(p("proj.cprj.log")).unwrap();
    assert!(log.lines().count() >= 2);
    for out in [
        "kept.txt",
        "neigh.pairs",
        "proj.cprj",
        "tuned.cmvs",
        "tuned.cemb",
        "hist.txt",
        "shift.tsv",
        "mention.tsv",
    ] {
        let manifest = manifest_of(&p(out));
        assert!(manifest.contains("config.seed=3\n"), "{out}");
        assert!(manifest.contains(".sha256="), "{out}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (store, _) = fixture(d);
    let pairs = d.join("pairs");
    ok(&["mine-neigh", "--store", s(&store), "--out", s(&pairs)]);
    let mut models = Vec::new();
    let out = d.join("m.cprj");
    for threads in ["1", "1", "4"] {
        ok(&[
            "train-proj",
            "--store",
            s(&store),
            "--pairs",
            s(&pairs),
            "--out-dim",
            "8",
            "--max-epochs",
            "4",
            "--lr",
            "0.01",
            "--threads",
            threads,
            "--out",
            s(&out),
        ]);
        models.push((std::fs::read(&out).unwrap(), manifest_of(&out)));
    }
    assert_eq!(models[0], models[1]);
    assert_eq!(models[0].0, models[2].0);
}

#[test]
fn concept_property_mining_feeds_group_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let words = ["shark", "whale", "coral", "lemon", "lime", "vinegar"];
    let corpus = [
        "the shark lives in water",
        "a whale lives in water",
        "coral lives in water",
        "the shark hunts",
        "lemon is sour",
        "lime is sour",
        "vinegar is sour",
        "sharks are fish",
    ];
    let mut b = StoreBuilder::new(3, Vocabulary::from_words(words).unwrap()).unwrap();
    for (sid, line) in corpus.iter().enumerate() {
        for (w, word) in words.iter().enumerate() {
            if line.split(' ').any(|t| t == *word) {
                let v = [w as f32 + 1.0, sid as f32, 1.0];
                b.push(ConceptId(w as u32), sid as u32, &v).unwrap();
            }
        }
    }
    let store = d.join("cn.cmvs");
    write_store(&b.build(), &store).unwrap();
    let corpus_path = d.join("corpus.txt");
    std::fs::write(&corpus_path, corpus.join("\n") + "\n").unwrap();
    let props = d.join("props.tsv");
    std::fs::write(
        &props,
        "shark\tlives in water\nwhale\tlives in water\ncoral\tlives in water\n\
         lemon\tis sour\nlime\tis sour\nvinegar\tis sour\nshark\tis fish\n",
    )
    .unwrap();
    let pairs = d.join("cn.pairs");
    ok(&[
        "mine-cn",
        "--corpus",
        s(&corpus_path),
        "--properties",
        s(&props),
        "--store",
        s(&store),
        "--out",
        s(&pairs),
    ]);
    let text = std::fs::read_to_string(&pairs).unwrap();
    // three mentions per property, all in different sentences
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 6);
    let manifest = manifest_of(&pairs);
    assert!(manifest.contains("result.pruned-properties=1\n"));
    assert!(manifest.contains("result.groups=2\n"));

    let groups = d.join("cn.pairs.groups");
    assert_eq!(std::fs::read_to_string(&groups).unwrap().lines().count(), 6);
    ok(&[
        "train-proj",
        "--store",
        s(&store),
        "--groups",
        s(&groups),
        "--out-dim",
        "2",
        "--max-epochs",
        "3",
        "--val-fraction",
        "0",
        "--out",
        s(&d.join("g.cprj")),
    ]);
    let both = condist(&[
        "train-proj",
        "--store",
        s(&store),
        "--groups",
        s(&groups),
        "--pairs",
        s(&pairs),
        "--out",
        s(&d.join("h.cprj")),
    ]);
    assert_eq!(both.status.code(), Some(2));
}
