//! Plain-text experiment configuration files: one `key = value` per
//! line, `#` starts a comment, unknown keys are rejected by name.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::csvlog::{write_round_csv, RoundLog};
use crate::data::{load_dataset, split_holdout, Scheme};
use crate::error::{Error, Result};
use crate::fedsim::{parse_schedule, run_experiment, ExperimentConfig};

/// Experiment parameters plus the harness inputs and outputs around
/// them: where the dataset lives and where the round CSV goes.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub dataset: PathBuf,
    pub out_csv: PathBuf,
}

const KEYS: [&str; 20] = [
    "m_clients",
    "frac_active",
    "rounds",
    "local_epochs",
    "server_epochs",
    "batch_size",
    "lr",
    "momentum",
    "tau",
    "schedule",
    "partition",
    "partition_param",
    "n_labeled",
    "weak_stages",
    "strong_stages",
    "mix",
    "seed",
    "dataset",
    "pretrained",
    "out_csv",
];

fn parse_value<T: FromStr>(key: &str, raw: &str, what: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| {
        Error::config(format!("config key `{key}`: cannot parse \"{raw}\" as {what} ({e})"))
    })
}

pub fn parse_partition_name(name: &str) -> Result<Scheme> {
    match name {
        "iid" => Ok(Scheme::Iid),
        "label-skew" => Ok(Scheme::LabelSkewK),
        "dirichlet" => Ok(Scheme::Dirichlet),
        other => Err(Error::config(format!(
            "unknown partition \"{other}\" (valid: iid, label-skew, dirichlet)"
        ))),
    }
}

pub fn partition_name(scheme: Scheme) -> &'static str {
    match scheme {
        Scheme::Iid => "iid",
        Scheme::LabelSkewK => "label-skew",
        Scheme::Dirichlet => "dirichlet",
    }
}

/// Parses config text into key/value pairs. Line numbers are 1-based
/// in error messages; duplicate and unknown keys fail fast.
fn parse_pairs(text: &str) -> Result<HashMap<String, String>> {
    let mut pairs = HashMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {}: expected `key = value`", i + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(Error::config(format!(
                "config line {}: unknown key `{key}`",
                i + 1
            )));
        }
        if pairs.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::config(format!(
                "config line {}: duplicate key `{key}`",
                i + 1
            )));
        }
    }
    Ok(pairs)
}

/// Builds a RunConfig from config text. Keys `dataset`, `out_csv`, and
/// `n_labeled` are required; the rest default to a small alternate-
/// schedule run (M=100, C=0.1, 100 rounds, one epoch per side,
/// batch 32, lr 0.05, momentum 0.9, tau 0.95, IID partition, weak
/// "basic", strong "basic,spec", seed 0).
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let pairs = parse_pairs(text)?;
    let get = |key: &str| pairs.get(key).map(String::as_str);
    let require = |key: &str| {
        get(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::config(format!("missing required config key `{key}`")))
    };

    let (schedule, clients_supervised) = parse_schedule(get("schedule").unwrap_or("alternate"))?;
    let partition = parse_partition_name(get("partition").unwrap_or("iid"))?;
    let mix = match get("mix").unwrap_or("false") {
        "true" => true,
        "false" => false,
        other => {
            return Err(Error::config(format!(
                "config key `mix`: cannot parse \"{other}\" as a bool (use true or false)"
            )))
        }
    };

    let experiment = ExperimentConfig {
        m_clients: match get("m_clients") {
            Some(v) => parse_value("m_clients", v, "an integer")?,
            None => 100,
        },
        frac_active: match get("frac_active") {
            Some(v) => parse_value("frac_active", v, "a real")?,
            None => 0.1,
        },
        rounds: match get("rounds") {
            Some(v) => parse_value("rounds", v, "an integer")?,
            None => 100,
        },
        local_epochs: match get("local_epochs") {
            Some(v) => parse_value("local_epochs", v, "an integer")?,
            None => 1,
        },
        server_epochs: match get("server_epochs") {
            Some(v) => parse_value("server_epochs", v, "an integer")?,
            None => 1,
        },
        batch_size: match get("batch_size") {
            Some(v) => parse_value("batch_size", v, "an integer")?,
            None => 32,
        },
        lr: match get("lr") {
            Some(v) => parse_value("lr", v, "a real")?,
            None => 0.05,
        },
        momentum: match get("momentum") {
            Some(v) => parse_value("momentum", v, "a real")?,
            None => 0.9,
        },
        tau: match get("tau") {
            Some(v) => parse_value("tau", v, "a real")?,
            None => 0.95,
        },
        schedule,
        clients_supervised,
        partition,
        partition_param: match get("partition_param") {
            Some(v) => parse_value("partition_param", v, "a real")?,
            None => 0.0,
        },
        n_labeled: parse_value("n_labeled", require("n_labeled")?, "an integer")?,
        weak_stages: get("weak_stages").unwrap_or("basic").to_string(),
        strong_stages: get("strong_stages").unwrap_or("basic,spec").to_string(),
        mix,
        seed: match get("seed") {
            Some(v) => parse_value("seed", v, "an integer")?,
            None => 0,
        },
        pretrained_path: get("pretrained")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from),
    };
    experiment.validate()?;

    Ok(RunConfig {
        experiment,
        dataset: PathBuf::from(require("dataset")?),
        out_csv: PathBuf::from(require("out_csv")?),
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Fraction of the dataset held out for per-round evaluation.
pub const TEST_FRAC: f64 = 0.1;

/// Loads the configured dataset, carves the evaluation holdout, runs the
/// experiment, and writes the per-round CSV. `on_round` sees each round's
/// log in order; the return value is the final test accuracy.
pub fn execute_run(cfg: &RunConfig, mut on_round: impl FnMut(&RoundLog)) -> Result<f64> {
    let ds = load_dataset(&cfg.dataset)?;
    let (train, test) = split_holdout(&ds, TEST_FRAC, cfg.experiment.seed)?;
    let outcome = run_experiment(&cfg.experiment, &train, &test)?;
    let logs = outcome.logs();
    for log in &logs {
        on_round(log);
    }
    write_round_csv(&logs, &cfg.out_csv)?;
    Ok(outcome.final_accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::Schedule;

    const MINIMAL: &str = "dataset = d.skws\nout_csv = out.csv\nn_labeled = 120\n";

    #[test]
    fn minimal_config_gets_the_documented_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let e = &cfg.experiment;
        assert_eq!(e.m_clients, 100);
        assert_eq!(e.frac_active, 0.1);
        assert_eq!(e.rounds, 100);
        assert_eq!(e.local_epochs, 1);
        assert_eq!(e.server_epochs, 1);
        assert_eq!(e.batch_size, 32);
        assert_eq!(e.lr, 0.05);
        assert_eq!(e.momentum, 0.9);
        assert_eq!(e.tau, 0.95);
        assert_eq!(e.schedule, Schedule::Alternate);
        assert!(!e.clients_supervised);
        assert_eq!(e.partition, Scheme::Iid);
        assert_eq!(e.n_labeled, 120);
        assert_eq!(e.weak_stages, "basic");
        assert_eq!(e.strong_stages, "basic,spec");
        assert!(!e.mix);
        assert_eq!(e.seed, 0);
        assert!(e.pretrained_path.is_none());
        assert_eq!(cfg.dataset, PathBuf::from("d.skws"));
        assert_eq!(cfg.out_csv, PathBuf::from("out.csv"));
    }

    #[test]
    fn every_key_lands_in_its_field() {
        let text = "\
# full config
m_clients = 20
frac_active = 0.25
rounds = 60
local_epochs = 2
server_epochs = 3
batch_size = 16
lr = 0.1          # inline comment
momentum = 0.8
tau = 0.9
schedule = parallel-fl
partition = label-skew
partition_param = 2
n_labeled = 120
weak_stages =
strong_stages = basic,spec,mix
mix = true
seed = 7
dataset = data/train.skws
pretrained = warm.params
out_csv = runs/a.csv
";
        let cfg = parse_config_str(text).unwrap();
        let e = &cfg.experiment;
        assert_eq!(e.m_clients, 20);
        assert_eq!(e.frac_active, 0.25);
        assert_eq!(e.rounds, 60);
        assert_eq!(e.local_epochs, 2);
        assert_eq!(e.server_epochs, 3);
        assert_eq!(e.batch_size, 16);
        assert_eq!(e.lr, 0.1);
        assert_eq!(e.momentum, 0.8);
        assert_eq!(e.tau, 0.9);
        assert_eq!(e.schedule, Schedule::Parallel);
        assert!(e.clients_supervised);
        assert_eq!(e.partition, Scheme::LabelSkewK);
        assert_eq!(e.partition_param, 2.0);
        assert_eq!(e.weak_stages, "");
        assert_eq!(e.strong_stages, "basic,spec,mix");
        assert!(e.mix);
        assert_eq!(e.seed, 7);
        assert_eq!(e.pretrained_path, Some(PathBuf::from("warm.params")));
        assert_eq!(cfg.dataset, PathBuf::from("data/train.skws"));
        assert_eq!(cfg.out_csv, PathBuf::from("runs/a.csv"));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_named() {
        let err = parse_config_str("n_labelled = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `n_labelled`"), "{err}");

        let err = parse_config_str(&format!("{MINIMAL}seed = 1\nseed = 2\n")).unwrap_err();
        assert!(err.to_string().contains("duplicate key `seed`"), "{err}");
        assert!(err.to_string().contains("line 5"), "{err}");
    }

    #[test]
    fn missing_required_keys_are_named() {
        for missing in ["dataset", "out_csv", "n_labeled"] {
            let text: String = MINIMAL
                .lines()
                .filter(|l| !l.starts_with(missing))
                .map(|l| format!("{l}\n"))
                .collect();
            let err = parse_config_str(&text).unwrap_err();
            assert!(err.to_string().contains(missing), "{missing}: {err}");
        }
    }

    #[test]
    fn bad_values_name_key_and_value() {
        let err = parse_config_str(&format!("{MINIMAL}lr = fast\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`lr`") && msg.contains("fast"), "{msg}");

        let err = parse_config_str(&format!("{MINIMAL}mix = yes\n")).unwrap_err();
        assert!(err.to_string().contains("yes"), "{err}");

        let err = parse_config_str(&format!("{MINIMAL}schedule = bogus\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        let err = parse_config_str(&format!("{MINIMAL}partition = sorted\n")).unwrap_err();
        assert!(err.to_string().contains("sorted"), "{err}");

        let err = parse_config_str("just a line\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn out_of_range_values_fail_at_parse_time() {
        let err = parse_config_str(&format!("{MINIMAL}tau = 1.5\n")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = parse_config_str(&format!("{MINIMAL}frac_active = 0\n")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn partition_names_round_trip() {
        for s in [Scheme::Iid, Scheme::LabelSkewK, Scheme::Dirichlet] {
            assert_eq!(parse_partition_name(partition_name(s)).unwrap(), s);
        }
    }
}
