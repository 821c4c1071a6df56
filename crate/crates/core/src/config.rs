//! Experiment configuration: `key = value` lines or an equivalent JSON object.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::weights::{Weight, DEFAULT_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Worst,
    Average,
    Christoffel,
    KernelCheck,
    Needle,
    Fit,
    Basis,
    Selftest,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Worst,
        Experiment::Average,
        Experiment::Christoffel,
        Experiment::KernelCheck,
        Experiment::Needle,
        Experiment::Fit,
        Experiment::Basis,
        Experiment::Selftest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Worst => "worst",
            Experiment::Average => "average",
            Experiment::Christoffel => "christoffel",
            Experiment::KernelCheck => "kernel-check",
            Experiment::Needle => "needle",
            Experiment::Fit => "fit",
            Experiment::Basis => "basis",
            Experiment::Selftest => "selftest",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                format!(
                    "unknown experiment '{s}' (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Degrees to sweep: `a..b` (inclusive) or a comma list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NSpec {
    Range(usize, usize),
    List(Vec<usize>),
}

impl NSpec {
    pub fn values(&self) -> Vec<usize> {
        match self {
            NSpec::Range(a, b) => (*a..=*b).collect(),
            NSpec::List(v) => v.clone(),
        }
    }

    pub fn max(&self) -> usize {
        self.values().into_iter().max().unwrap_or(0)
    }
}

impl fmt::Display for NSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NSpec::Range(a, b) => write!(f, "{a}..{b}"),
            NSpec::List(v) => {
                let s: Vec<String> = v.iter().map(|n| n.to_string()).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl FromStr for NSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once("..") {
            let a: usize = a
                .trim()
                .parse()
                .map_err(|_| format!("bad range start in '{s}'"))?;
            let b: usize = b
                .trim()
                .parse()
                .map_err(|_| format!("bad range end in '{s}'"))?;
            if a > b {
                return Err(format!("empty degree range '{s}'"));
            }
            return Ok(NSpec::Range(a, b));
        }
        let v: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("bad degree list '{s}'"))?;
        if v.is_empty() {
            return Err("empty degree list".into());
        }
        Ok(NSpec::List(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub dimension: usize,
    pub weight: Weight,
    pub n: NSpec,
    pub p: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub restarts: usize,
    pub output: PathBuf,
    /// Ball-measure budget (nodes or samples per measure).
    pub budget: usize,
    /// Verification grid size; `0` selects the dimension default.
    pub grid: usize,
    pub sigma: f64,
    /// Needle decay exponent; `None` derives it from the doubling estimate.
    pub k: Option<f64>,
    /// Input CSV for `fit`.
    pub input: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Selftest,
            dimension: 2,
            weight: Weight::Jacobi { mu: 0.5 },
            n: NSpec::Range(2, 16),
            p: vec![2.0],
            samples: 2000,
            seed: 0,
            restarts: crate::markov::DEFAULT_RESTARTS,
            output: PathBuf::from("out"),
            budget: DEFAULT_BUDGET,
            grid: 0,
            sigma: 1.0,
            k: None,
            input: None,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "experiment",
    "dimension",
    "weight",
    "n",
    "n_min",
    "n_max",
    "p",
    "samples",
    "seed",
    "restarts",
    "output",
    "budget",
    "grid",
    "sigma",
    "k",
    "input",
];

fn strip_quotes(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2
        && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\'')))
    {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.trim()
        .parse()
        .map_err(|_| format!("malformed value '{v}' for key '{key}'"))
}

#[derive(Default)]
struct Builder {
    cfg: ExperimentConfig,
    seen: Vec<(String, usize)>,
    n_min: Option<usize>,
    n_max: Option<usize>,
    n_set: bool,
}

impl Builder {
    fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
        let err = |message: String| Error::Config { line, message };
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key '{key}'")));
        }
        if let Some((_, first)) = self.seen.iter().find(|(k, _)| k == key) {
            return Err(err(format!(
                "duplicate key '{key}' (first set on line {first})"
            )));
        }
        self.seen.push((key.to_string(), line));
        let v = strip_quotes(raw);
        let c = &mut self.cfg;
        match key {
            "experiment" => c.experiment = v.parse().map_err(err)?,
            "dimension" => {
                c.dimension = num(key, v).map_err(err)?;
                if !(2..=3).contains(&c.dimension) {
                    return Err(err(format!(
                        "dimension must be 2 or 3, got {}",
                        c.dimension
                    )));
                }
            }
            "weight" => c.weight = Weight::parse(v).map_err(|e| err(e.to_string()))?,
            "n" => {
                c.n = v.parse().map_err(err)?;
                self.n_set = true;
            }
            "n_min" => self.n_min = Some(num(key, v).map_err(err)?),
            "n_max" => self.n_max = Some(num(key, v).map_err(err)?),
            "p" => {
                let ps: Vec<f64> = v
                    .split(',')
                    .map(|t| num::<f64>(key, t))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(err)?;
                if ps.is_empty() || ps.iter().any(|p| !(*p >= 1.0) || !p.is_finite()) {
                    return Err(err(format!("p values must lie in [1, inf), got '{v}'")));
                }
                c.p = ps;
            }
            "samples" => c.samples = num(key, v).map_err(err)?,
            "seed" => c.seed = num(key, v).map_err(err)?,
            "restarts" => c.restarts = num(key, v).map_err(err)?,
            "output" => {
                if v.is_empty() {
                    return Err(err("output path is empty".into()));
                }
                c.output = PathBuf::from(v);
            }
            "budget" => {
                c.budget = num(key, v).map_err(err)?;
                if c.budget < 100 {
                    return Err(err(format!(
                        "budget must be at least 100, got {}",
                        c.budget
                    )));
                }
            }
            "grid" => c.grid = num(key, v).map_err(err)?,
            "sigma" => {
                c.sigma = num(key, v).map_err(err)?;
                if !(c.sigma > 0.0) || !c.sigma.is_finite() {
                    return Err(err(format!("sigma must be positive, got {v}")));
                }
            }
            "k" => {
                let k: f64 = num(key, v).map_err(err)?;
                if !(k > 0.0) || !k.is_finite() {
                    return Err(err(format!("k must be positive, got {v}")));
                }
                c.k = Some(k);
            }
            "input" => c.input = Some(PathBuf::from(v)),
            _ => unreachable!("key list is exhaustive"),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<ExperimentConfig> {
        let line_of = |k: &str| {
            self.seen
                .iter()
                .find(|(s, _)| s == k)
                .map(|(_, l)| *l)
                .unwrap_or(0)
        };
        if self.n_min.is_some() || self.n_max.is_some() {
            if self.n_set {
                return Err(Error::Config {
                    line: line_of("n_min").max(line_of("n_max")),
                    message: "'n' and 'n_min'/'n_max' are mutually exclusive".into(),
                });
            }
            let (a, b) = match &self.cfg.n {
                NSpec::Range(a, b) => (*a, *b),
                NSpec::List(_) => unreachable!("default is a range"),
            };
            let (a, b) = (self.n_min.unwrap_or(a), self.n_max.unwrap_or(b));
            if a > b {
                return Err(Error::Config {
                    line: line_of("n_max").max(line_of("n_min")),
                    message: format!("empty degree range {a}..{b}"),
                });
            }
            self.cfg.n = NSpec::Range(a, b);
        }
        self.cfg
            .weight
            .check_dim(self.cfg.dimension)
            .map_err(|e| Error::Config {
                line: line_of("weight").max(line_of("dimension")),
                message: e.to_string(),
            })?;
        Ok(self.cfg)
    }
}

/// Parses `key = value` lines (`#` starts a comment) or a JSON object.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    if text.trim_start().starts_with('{') {
        return parse_json(text);
    }
    let mut b = Builder::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(i) if !inside_quotes(raw, i) => &raw[..i],
            _ => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected 'key = value', got '{content}'"),
        })?;
        b.set(k.trim(), v, line)?;
    }
    b.finish()
}

fn inside_quotes(s: &str, pos: usize) -> bool {
    s[..pos].chars().filter(|&c| c == '"').count() % 2 == 1
}

fn parse_json(text: &str) -> Result<ExperimentConfig> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config {
        line: e.line(),
        message: format!("invalid JSON: {e}"),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Config {
        line: 1,
        message: "JSON config must be an object".into(),
    })?;
    let line_of = |key: &str| {
        let needle = format!("\"{key}\"");
        text.lines()
            .position(|l| l.contains(&needle))
            .map(|i| i + 1)
            .unwrap_or(1)
    };
    let mut b = Builder::default();
    for (k, v) in obj {
        let line = line_of(k);
        let raw = match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    serde_json::Value::Number(n) => Ok(n.to_string()),
                    serde_json::Value::String(s) => Ok(s.clone()),
                    other => Err(Error::Config {
                        line,
                        message: format!("unsupported list item {other} for key '{k}'"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            other => {
                return Err(Error::Config {
                    line,
                    message: format!("unsupported value {other} for key '{k}'"),
                })
            }
        };
        b.set(k, &raw, line)?;
    }
    b.finish()
}

impl ExperimentConfig {
    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let ps: Vec<String> = self.p.iter().map(|p| format!("{p:?}")).collect();
        let mut s = format!(
            "experiment = {}\ndimension = {}\nweight = {}\nn = {}\np = {}\nsamples = {}\nseed = {}\nrestarts = {}\noutput = {}\nbudget = {}\ngrid = {}\nsigma = {:?}\n",
            self.experiment,
            self.dimension,
            self.weight,
            self.n,
            ps.join(","),
            self.samples,
            self.seed,
            self.restarts,
            self.output.display(),
            self.budget,
            self.grid,
            self.sigma,
        );
        if let Some(k) = self.k {
            s.push_str(&format!("k = {k:?}\n"));
        }
        if let Some(i) = &self.input {
            s.push_str(&format!("input = {}\n", i.display()));
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, leaving out
    /// the output path so that relocated runs share a hash.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("output ="))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn grid_size(&self) -> usize {
        if self.grid == 0 {
            crate::geometry::default_grid_size(self.dimension)
        } else {
            self.grid
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spec_example_parses() {
        let c =
            parse_config("experiment = worst\nweight = jacobi:mu=1.0\nn = 2..16\np = 2").unwrap();
        assert_eq!(c.experiment, Experiment::Worst);
        assert_eq!(c.weight, Weight::jacobi(1.0).unwrap());
        assert_eq!(c.n.values(), (2..=16).collect::<Vec<_>>());
        assert_eq!(c.p, vec![2.0]);
    }

    #[test]
    fn negative_mu_is_rejected_with_line() {
        let e = parse_config("experiment = worst\nweight = jacobi:mu=-1").unwrap_err();
        match e {
            Error::Config { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse_config("# comment\n\nseed = 3\ncolour = blue\n").unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Config { line: 4, .. }), "{msg}");
        assert!(msg.contains("colour"));
    }

    #[test]
    fn malformed_and_duplicate_values() {
        assert!(matches!(
            parse_config("samples = many"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            parse_config("seed = 1\nseed = 2"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(parse_config("n = 5..2").is_err());
        assert!(parse_config("p = 0.5").is_err());
        assert!(parse_config("dimension = 4").is_err());
        assert!(parse_config("no equals sign").is_err());
        assert!(parse_config("n = 4\nn_min = 2").is_err());
    }

    #[test]
    fn n_min_max_and_lists() {
        let c = parse_config("n_min = 3\nn_max = 5").unwrap();
        assert_eq!(c.n, NSpec::Range(3, 5));
        let c = parse_config("n = 4, 8,16").unwrap();
        assert_eq!(c.n.values(), vec![4, 8, 16]);
    }

    #[test]
    fn json_form() {
        let text = "{\n  \"experiment\": \"average\",\n  \"weight\": \"product:g=0.5,0.5;mu=0.5\",\n  \"n\": \"2..16\",\n  \"p\": [1, 2, 4],\n  \"samples\": 2000\n}";
        let c = parse_config(text).unwrap();
        assert_eq!(c.experiment, Experiment::Average);
        assert_eq!(c.p, vec![1.0, 2.0, 4.0]);
        let bad = "{\n  \"seed\": 1,\n  \"colour\": \"blue\"\n}";
        assert!(matches!(
            parse_config(bad),
            Err(Error::Config { line: 3, .. })
        ));
    }

    #[test]
    fn weight_dimension_mismatch() {
        assert!(parse_config("dimension = 3\nweight = product:g=0.5,0.5;mu=0.5").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse_config("seed = 1").unwrap();
        let b = parse_config("seed = 2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), parse_config(&a.to_text()).unwrap().hash());
        assert_eq!(a.hash().len(), 16);
        let moved = parse_config("seed = 1\noutput = elsewhere").unwrap();
        assert_eq!(a.hash(), moved.hash());
    }

    fn arb_weight() -> impl Strategy<Value = Weight> {
        prop_oneof![
            (0.0f64..5.0).prop_map(|mu| Weight::jacobi(mu).unwrap()),
            (0.0f64..2.0, 0.0f64..2.0, 0.0f64..3.0).prop_map(|(a, b, mu)| Weight::product(
                vec![a, b],
                mu
            )
            .unwrap()),
            (0.05f64..0.95, 0.01f64..100.0).prop_map(|(a, c)| Weight::step(a, c).unwrap()),
        ]
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            prop::sample::select(Experiment::ALL.to_vec()),
            arb_weight(),
            prop_oneof![
                (0usize..20, 0usize..20).prop_map(|(a, b)| NSpec::Range(a.min(b), a.max(b))),
                prop::collection::vec(1usize..64, 1..5).prop_map(NSpec::List),
            ],
            prop::collection::vec(1.0f64..8.0, 1..4),
            (
                100usize..10_000,
                any::<u64>(),
                0usize..10,
                100usize..50_000,
                0usize..20_000,
            ),
            (
                1e-3f64..100.0,
                prop::option::of(0.5f64..10.0),
                prop::option::of("[a-z]{1,8}\\.csv"),
            ),
            "[a-z][a-z0-9_/]{0,12}",
        )
            .prop_map(
                |(
                    experiment,
                    weight,
                    n,
                    p,
                    (samples, seed, restarts, budget, grid),
                    (sigma, k, input),
                    output,
                )| {
                    ExperimentConfig {
                        experiment,
                        dimension: 2,
                        weight,
                        n,
                        p,
                        samples,
                        seed,
                        restarts,
                        output: PathBuf::from(output),
                        budget,
                        grid,
                        sigma,
                        k,
                        input: input.map(PathBuf::from),
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn round_trip(cfg in arb_config()) {
            let text = cfg.to_text();
            let back = parse_config(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
            prop_assert_eq!(back.hash(), cfg.hash());
        }
    }
}
