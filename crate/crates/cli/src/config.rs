//! Run configuration.
//!
//! Values are layered: built-in desk-scale defaults, then an optional named
//! preset, then `key = value` lines from a config file, then command-line
//! overrides. Every key accepted in a file is also accepted by `--set`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use maq_core::agents::{AgentKind, BcConfig, SacConfig};
use maq_core::vqvae::VqConfig;
use maq_core::{MaqError, Result};

pub const OUT_ENV: &str = "MAQ_LAB_OUT";
pub const DEFAULT_OUT: &str = "maq-lab-out";
pub const CODEBOOK_SIZES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub horizon: usize,
    pub codes: usize,
    pub latent_dim: usize,
    pub vq_hidden: usize,
    pub beta: f64,
    pub vq_learning_rate: f64,
    pub vq_batch_size: usize,
    pub vq_epochs: usize,

    pub gamma: f64,
    pub agent_batch_size: usize,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub alpha_learning_rate: f64,
    pub initial_alpha: f64,
    pub tau: f64,
    pub agent_hidden: usize,
    pub warmup: usize,
    pub decisions: usize,
    pub grid_decisions: usize,
    pub buffer_capacity: usize,
    pub target_entropy_fraction: f64,
    pub symmetric_ratio: f64,
    pub shaping_scale: f64,
    pub eval_interval: usize,
    pub grid_eval_interval: usize,
    pub train_eval_episodes: usize,

    pub bc_hidden: usize,
    pub bc_learning_rate: f64,
    pub bc_batch_size: usize,
    pub bc_epochs: usize,

    pub demo_count: usize,
    pub split_seed: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub random_episodes: usize,
    pub random_seed: u64,

    pub seeds: Vec<u64>,
    pub agent: AgentKind,
    pub ablate_agent: AgentKind,
    /// Allow `H` and `K` outside the standard sweep ranges.
    pub unchecked_shape: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vq = VqConfig::default();
        let sac = SacConfig::default();
        let bc = BcConfig::default();
        Self {
            horizon: vq.horizon,
            codes: vq.codes,
            latent_dim: vq.latent_dim,
            vq_hidden: vq.hidden,
            beta: vq.beta,
            vq_learning_rate: vq.learning_rate,
            vq_batch_size: vq.batch_size,
            vq_epochs: vq.epochs,
            gamma: sac.gamma,
            agent_batch_size: sac.batch_size,
            actor_learning_rate: sac.actor_lr,
            critic_learning_rate: sac.critic_lr,
            alpha_learning_rate: sac.alpha_lr,
            initial_alpha: sac.initial_alpha,
            tau: sac.tau,
            agent_hidden: sac.hidden,
            warmup: sac.warmup,
            decisions: sac.total_decisions,
            grid_decisions: SacConfig::grid().total_decisions,
            buffer_capacity: sac.buffer_capacity,
            target_entropy_fraction: sac.target_entropy_fraction,
            symmetric_ratio: SacConfig::symmetric().symmetric_ratio,
            shaping_scale: sac.shaping_scale,
            eval_interval: sac.eval_interval,
            grid_eval_interval: SacConfig::grid().eval_interval,
            train_eval_episodes: sac.eval_episodes,
            bc_hidden: bc.hidden,
            bc_learning_rate: bc.learning_rate,
            bc_batch_size: bc.batch_size,
            bc_epochs: bc.epochs,
            demo_count: 25,
            split_seed: 0,
            eval_episodes: 100,
            eval_seed: 7_001,
            random_episodes: 25,
            random_seed: 9_001,
            seeds: vec![1, 10, 100],
            agent: AgentKind::MaqDsac,
            ablate_agent: AgentKind::MaqSymmetric,
            unchecked_shape: false,
            out: PathBuf::from(DEFAULT_OUT),
        }
    }
}

macro_rules! scalar_keys {
    ($($key:literal => $field:ident),* $(,)?) => {
        impl RunConfig {
            fn set_scalar(&mut self, key: &str, value: &str) -> Option<Result<()>> {
                match key {
                    $($key => Some(
                        value
                            .parse()
                            .map(|v| self.$field = v)
                            .map_err(|_| MaqError::Config(format!("{key}: cannot parse '{value}'"))),
                    ),)*
                    _ => None,
                }
            }

            fn scalar_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$field.to_string())),*]
            }
        }
    };
}

scalar_keys! {
    "horizon" => horizon,
    "codes" => codes,
    "latent_dim" => latent_dim,
    "vq_hidden" => vq_hidden,
    "beta" => beta,
    "vq_learning_rate" => vq_learning_rate,
    "vq_batch_size" => vq_batch_size,
    "vq_epochs" => vq_epochs,
    "gamma" => gamma,
    "agent_batch_size" => agent_batch_size,
    "actor_learning_rate" => actor_learning_rate,
    "critic_learning_rate" => critic_learning_rate,
    "alpha_learning_rate" => alpha_learning_rate,
    "initial_alpha" => initial_alpha,
    "tau" => tau,
    "agent_hidden" => agent_hidden,
    "warmup" => warmup,
    "decisions" => decisions,
    "grid_decisions" => grid_decisions,
    "buffer_capacity" => buffer_capacity,
    "target_entropy_fraction" => target_entropy_fraction,
    "symmetric_ratio" => symmetric_ratio,
    "shaping_scale" => shaping_scale,
    "eval_interval" => eval_interval,
    "grid_eval_interval" => grid_eval_interval,
    "train_eval_episodes" => train_eval_episodes,
    "bc_hidden" => bc_hidden,
    "bc_learning_rate" => bc_learning_rate,
    "bc_batch_size" => bc_batch_size,
    "bc_epochs" => bc_epochs,
    "demo_count" => demo_count,
    "split_seed" => split_seed,
    "eval_episodes" => eval_episodes,
    "eval_seed" => eval_seed,
    "random_episodes" => random_episodes,
    "random_seed" => random_seed,
    "unchecked_shape" => unchecked_shape,
}

pub fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| MaqError::Config(format!("{what}: cannot parse '{s}'"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(MaqError::Config(format!("{what}: list is empty")));
    }
    Ok(items)
}

fn parse_agent(value: &str) -> Result<AgentKind> {
    AgentKind::from_tag(value).ok_or_else(|| {
        let known: Vec<&str> = AgentKind::ALL.iter().map(|k| k.tag()).collect();
        MaqError::Config(format!("unknown agent '{value}' (expected one of {})", known.join(", ")))
    })
}

impl RunConfig {
    /// Published large-scale settings.
    pub fn paper() -> Self {
        let sac = SacConfig::paper();
        let vq = VqConfig::paper();
        Self {
            horizon: vq.horizon,
            latent_dim: vq.latent_dim,
            agent_batch_size: sac.batch_size,
            warmup: sac.warmup,
            decisions: sac.total_decisions,
            grid_decisions: sac.total_decisions,
            buffer_capacity: sac.buffer_capacity,
            eval_interval: sac.eval_interval,
            grid_eval_interval: sac.eval_interval,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" | "default" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            other => Err(MaqError::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(result) = self.set_scalar(key, value) {
            return result;
        }
        match key {
            "seeds" => self.seeds = parse_list(value, "seeds")?,
            "agent" => self.agent = parse_agent(value)?,
            "ablate_agent" => self.ablate_agent = parse_agent(value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(MaqError::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| MaqError::Config(format!("expected key=value, found '{assignment}'")))?;
        self.set(key.trim(), value.trim())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MaqError::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| MaqError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MaqError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every setting as `key -> value`, in key order.
    pub fn pairs(&self) -> BTreeMap<String, String> {
        let mut map: BTreeMap<String, String> = self
            .scalar_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        map.insert("seeds".into(), seeds.join(","));
        map.insert("agent".into(), self.agent.tag().into());
        map.insert("ablate_agent".into(), self.ablate_agent.tag().into());
        map.insert("out".into(), self.out.display().to_string());
        map
    }

    /// Config-file text that reproduces this configuration.
    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn check_shape(&self, horizon: usize, codes: usize) -> Result<()> {
        if self.unchecked_shape {
            return Ok(());
        }
        if !(1..=9).contains(&horizon) {
            return Err(MaqError::Config(format!(
                "H = {horizon} outside 1..=9 (set unchecked_shape = true to allow)"
            )));
        }
        if !CODEBOOK_SIZES.contains(&codes) {
            return Err(MaqError::Config(format!(
                "K = {codes} not in {{8, 16, 32}} (set unchecked_shape = true to allow)"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(MaqError::Config("seed list is empty".into()));
        }
        if self.demo_count < 2 {
            return Err(MaqError::Config("at least two demonstrations are needed for a split".into()));
        }
        if self.eval_episodes == 0 || self.random_episodes == 0 {
            return Err(MaqError::Config("evaluation and random episode counts must be positive".into()));
        }
        self.check_shape(self.horizon, self.codes)?;
        self.vq_config(self.horizon, self.codes, 0).validate()?;
        self.sac_config(AgentKind::MaqDsac, 0).validate()
    }

    pub fn vq_config(&self, horizon: usize, codes: usize, seed: u64) -> VqConfig {
        VqConfig {
            horizon,
            codes,
            latent_dim: self.latent_dim,
            hidden: self.vq_hidden,
            beta: self.beta,
            learning_rate: self.vq_learning_rate,
            batch_size: self.vq_batch_size,
            epochs: self.vq_epochs,
            seed,
        }
    }

    pub fn sac_config(&self, kind: AgentKind, seed: u64) -> SacConfig {
        let grid = kind == AgentKind::GridDsac;
        SacConfig {
            gamma: self.gamma,
            batch_size: self.agent_batch_size,
            actor_lr: self.actor_learning_rate,
            critic_lr: self.critic_learning_rate,
            alpha_lr: self.alpha_learning_rate,
            initial_alpha: self.initial_alpha,
            tau: self.tau,
            hidden: self.agent_hidden,
            warmup: self.warmup,
            total_decisions: if grid { self.grid_decisions } else { self.decisions },
            buffer_capacity: self.buffer_capacity,
            target_entropy_fraction: self.target_entropy_fraction,
            symmetric_ratio: if kind == AgentKind::MaqSymmetric { self.symmetric_ratio } else { 0.0 },
            shaping_scale: self.shaping_scale,
            eval_interval: if grid { self.grid_eval_interval } else { self.eval_interval },
            eval_episodes: self.train_eval_episodes,
            seed,
        }
    }

    pub fn bc_config(&self, seed: u64) -> BcConfig {
        BcConfig {
            hidden: self.bc_hidden,
            learning_rate: self.bc_learning_rate,
            batch_size: self.bc_batch_size,
            epochs: self.bc_epochs,
            seed,
        }
    }
}

/// Output root: explicit path, else `MAQ_LAB_OUT`, else the default.
pub fn resolve_out(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.seeds, vec![1, 10, 100]);
        assert_eq!((c.horizon, c.codes, c.latent_dim), (8, 16, 32));
        assert_eq!(c.decisions, 20_000);
        assert_eq!(c.warmup, 1_000);
        c.validate().unwrap();
    }

    #[test]
    fn paper_preset() {
        let c = RunConfig::preset("paper").unwrap();
        assert_eq!((c.horizon, c.latent_dim, c.warmup, c.tau, c.gamma), (9, 256, 8_000, 0.005, 0.99));
        assert_eq!(c.symmetric_ratio, 0.5);
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn layered_text() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nhorizon = 4 # trailing\n\ncodes=32\nseeds = 3, 4\nagent = grid_dsac\n")
            .unwrap();
        assert_eq!((c.horizon, c.codes, c.seeds.clone(), c.agent), (4, 32, vec![3, 4], AgentKind::GridDsac));
        c.apply_override("horizon=2").unwrap();
        assert_eq!(c.horizon, 2);
        let err = c.apply_text("codes = 16\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(c.apply_text("horizon 3").is_err());
        assert!(c.apply_override("beta=abc").is_err());
    }

    #[test]
    fn text_echo_reproduces_config() {
        let mut c = RunConfig::preset("paper").unwrap();
        c.apply_text("seeds = 5\nunchecked_shape = true\nbeta = 0.125").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn shape_limits() {
        let mut c = RunConfig::default();
        assert!(c.check_shape(10, 16).is_err());
        assert!(c.check_shape(0, 16).is_err());
        assert!(c.check_shape(9, 12).is_err());
        c.check_shape(1, 8).unwrap();
        c.unchecked_shape = true;
        c.check_shape(12, 5).unwrap();
    }

    #[test]
    fn agent_specific_budgets() {
        let c = RunConfig::default();
        assert_eq!(c.sac_config(AgentKind::GridDsac, 1).total_decisions, 100_000);
        assert_eq!(c.sac_config(AgentKind::MaqDsac, 1).symmetric_ratio, 0.0);
        assert_eq!(c.sac_config(AgentKind::MaqSymmetric, 1).symmetric_ratio, 0.5);
    }
}
