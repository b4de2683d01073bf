//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Only `seed` is required; every
//! other key has a default, and [`ExperimentConfig::to_text`] writes the
//! effective configuration back in the same format.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::backbone::ModelConfig;
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::optim::SgdState;
use crate::schedule::ScheduleConfig;
use crate::selector::{Placement, SelectorConfig};
use crate::train::TrainSettings;

pub const MAX_ABLATION_CELLS: usize = 64;
pub const ECHO_FILE: &str = "config.echo";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub heads: Vec<usize>,
    pub k: Vec<usize>,
    pub positions: Vec<Placement>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            heads: vec![2],
            k: vec![1, 2, 3],
            positions: vec![Placement::Last, Placement::SecondToLast],
        }
    }
}

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationCell {
    pub heads: usize,
    pub k: usize,
    pub position: Placement,
}

impl AblationGrid {
    pub fn len(&self) -> usize {
        self.heads.len() * self.k.len() * self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in row-major order: heads, then K, then position.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::with_capacity(self.len());
        for &heads in &self.heads {
            for &k in &self.k {
                for &position in &self.positions {
                    out.push(AblationCell { heads, k, position });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("AblationGrid.heads", self.heads.is_empty()),
            ("AblationGrid.k", self.k.is_empty()),
            ("AblationGrid.positions", self.positions.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
        }
        if self.len() > MAX_ABLATION_CELLS {
            return Err(Error::Config(format!(
                "AblationGrid has {} cells, at most {MAX_ABLATION_CELLS} allowed",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Encoder sizes; grid and class count come from the data section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderSettings {
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub encoder: EncoderSettings,
    pub selector_enabled: bool,
    pub selector: SelectorConfig,
    /// `seed` of this is the effective data seed.
    pub data: GenConfig,
    /// Explicit `data.seed`; when absent the data seed follows `seed`.
    pub data_seed: Option<u64>,
    pub export_data: bool,
    pub train: TrainSettings,
    pub loss: LossWeights,
    pub ablation: AblationGrid,
}

impl ExperimentConfig {
    /// Defaults for everything but the seed.
    pub fn with_defaults(seed: u64) -> Self {
        let model = ModelConfig::default();
        ExperimentConfig {
            seed,
            output_dir: PathBuf::from("runs"),
            encoder: EncoderSettings {
                blocks: model.num_blocks,
                embed_dim: model.embed_dim,
                heads: model.num_attn_heads,
            },
            selector_enabled: true,
            selector: SelectorConfig::default(),
            data: GenConfig {
                seed,
                ..GenConfig::default()
            },
            data_seed: None,
            export_data: false,
            train: TrainSettings::default(),
            loss: LossWeights::default(),
            ablation: AblationGrid::default(),
        }
    }

    /// Replaces the run seed; the data seed follows unless set explicitly.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = self.data_seed.unwrap_or(seed);
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_blocks: self.encoder.blocks,
            embed_dim: self.encoder.embed_dim,
            num_attn_heads: self.encoder.heads,
            grid_rows: self.data.grid_rows,
            grid_cols: self.data.grid_cols,
            patch_dim: self.data.patch_dim,
            num_identities: self.data.num_ids,
            selector: self.selector_enabled.then(|| self.selector.clone()),
        }
    }

    /// Model configuration of one ablation cell.
    pub fn cell_model_config(&self, cell: AblationCell) -> ModelConfig {
        let mut cfg = self.model_config();
        cfg.selector = Some(SelectorConfig {
            num_heads: cell.heads,
            k: cell.k,
            position: cell.position,
            ..self.selector.clone()
        });
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let model = self.model_config();
        model.validate()?;
        self.selector.validate(model.num_patches(), model.embed_dim)?;
        self.loss.validate()?;
        ScheduleConfig::new(self.train.lr_max, self.train.lr_min, 1)?;
        SgdState::new(self.train.lr_max, self.train.momentum)?;
        for (name, v) in [
            ("TrainSettings.epochs", self.train.epochs),
            ("TrainSettings.ids_per_batch", self.train.ids_per_batch),
            ("TrainSettings.instances_per_id", self.train.instances_per_id),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.train.max_steps == Some(0) {
            return Err(Error::Config("TrainSettings.max_steps must be positive".into()));
        }
        if self.train.ids_per_batch > self.data.num_ids {
            return Err(Error::Config(format!(
                "TrainSettings.ids_per_batch {} exceeds the {} training identities",
                self.train.ids_per_batch, self.data.num_ids
            )));
        }
        self.ablation.validate()?;
        for cell in self.ablation.cells() {
            self.cell_model_config(cell).validate()?;
        }
        Ok(())
    }

    /// Every key with its effective value, in canonical order.
    pub fn to_text(&self) -> String {
        fn opt<T: Display>(v: Option<T>) -> String {
            v.map_or_else(|| "none".to_string(), |x| x.to_string())
        }
        fn list<T: Display>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let d = &self.data;
        let t = &self.train;
        let s = &self.selector;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("model.blocks", self.encoder.blocks.to_string()),
            ("model.embed_dim", self.encoder.embed_dim.to_string()),
            ("model.heads", self.encoder.heads.to_string()),
            ("selector.enabled", self.selector_enabled.to_string()),
            ("selector.heads", s.num_heads.to_string()),
            ("selector.k", s.k.to_string()),
            ("selector.position", s.position.to_string()),
            ("selector.temperature", s.temperature.to_string()),
            ("selector.noise", s.noise_enabled.to_string()),
            ("data.num_ids", d.num_ids.to_string()),
            ("data.test_ids", d.test_ids.to_string()),
            ("data.samples_per_id_per_view", d.samples_per_id_per_view.to_string()),
            ("data.grid_rows", d.grid_rows.to_string()),
            ("data.grid_cols", d.grid_cols.to_string()),
            ("data.patch_dim", d.patch_dim.to_string()),
            ("data.k_sig", d.k_sig.to_string()),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.view_offset_scale", d.view_offset_scale.to_string()),
            ("data.seed", opt(self.data_seed)),
            ("data.export", self.export_data.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.ids_per_batch", t.ids_per_batch.to_string()),
            ("train.instances_per_id", t.instances_per_id.to_string()),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.max_steps", opt(t.max_steps)),
            ("loss.view", self.loss.view.to_string()),
            ("loss.orth", self.loss.orth.to_string()),
            ("ablate.heads", list(&self.ablation.heads)),
            ("ablate.k", list(&self.ablation.k)),
            ("ablate.positions", list(&self.ablation.positions)),
        ];
        let mut out = String::from("# effective configuration\n");
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Writes [`Self::to_text`] to `dir/config.echo`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Entries {
    map: IndexMap<String, Entry>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        let Some(e) = self.map.shift_remove(key) else {
            return Ok(None);
        };
        e.value.parse::<T>().map(Some).map_err(|_| Error::Parse {
            line: e.line,
            message: format!("{key}: expected {what}, got {:?}", e.value),
        })
    }

    fn set<T: FromStr>(&mut self, key: &str, what: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key, what)? {
            *slot = v;
        }
        Ok(())
    }

    /// `none` or a value.
    fn set_opt<T: FromStr>(&mut self, key: &str, what: &str, slot: &mut Option<T>) -> Result<()> {
        if self.map.get(key).is_some_and(|e| e.value == "none") {
            self.map.shift_remove(key);
            *slot = None;
            return Ok(());
        }
        if let Some(v) = self.take(key, what)? {
            *slot = Some(v);
        }
        Ok(())
    }

    fn set_list<T: FromStr>(&mut self, key: &str, what: &str, slot: &mut Vec<T>) -> Result<()> {
        let Some(e) = self.map.shift_remove(key) else {
            return Ok(());
        };
        let mut out = Vec::new();
        for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            out.push(item.parse::<T>().map_err(|_| Error::Parse {
                line: e.line,
                message: format!("{key}: expected a comma-separated list of {what}, got {item:?}"),
            })?);
        }
        *slot = out;
        Ok(())
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// A bool spelled `true/false`, `yes/no`, `on/off` or `1/0`.
struct Flag(bool);

impl FromStr for Flag {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        parse_bool(s).map(Flag).ok_or(())
    }
}

/// Parses configuration text. The result is validated.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map = IndexMap::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Parse {
                line,
                message: format!("expected `key = value`, got {body:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty key".into(),
            });
        }
        if let Some(prev) = map.get::<str>(k) {
            let prev: &Entry = prev;
            return Err(Error::Parse {
                line,
                message: format!("duplicate key {k} (first set on line {})", prev.line),
            });
        }
        map.insert(k.to_string(), Entry { value: v.to_string(), line });
    }
    let mut e = Entries { map };

    let Some(seed) = e.take::<u64>("seed", "an unsigned integer")? else {
        return Err(Error::Parse {
            line: last_line,
            message: "missing required key seed".into(),
        });
    };
    let mut cfg = ExperimentConfig::with_defaults(seed);
    const UINT: &str = "an unsigned integer";
    const REAL: &str = "a number";
    const BOOL: &str = "true or false";

    let mut dir = cfg.output_dir.display().to_string();
    e.set("output_dir", "a path", &mut dir)?;
    cfg.output_dir = PathBuf::from(dir);

    e.set("model.blocks", UINT, &mut cfg.encoder.blocks)?;
    e.set("model.embed_dim", UINT, &mut cfg.encoder.embed_dim)?;
    e.set("model.heads", UINT, &mut cfg.encoder.heads)?;

    let mut flag = Flag(cfg.selector_enabled);
    e.set("selector.enabled", BOOL, &mut flag)?;
    cfg.selector_enabled = flag.0;
    let s = &mut cfg.selector;
    e.set("selector.heads", UINT, &mut s.num_heads)?;
    e.set("selector.k", UINT, &mut s.k)?;
    e.set("selector.position", "last or second_to_last", &mut s.position)?;
    e.set("selector.temperature", REAL, &mut s.temperature)?;
    let mut flag = Flag(s.noise_enabled);
    e.set("selector.noise", BOOL, &mut flag)?;
    s.noise_enabled = flag.0;

    let d = &mut cfg.data;
    e.set("data.num_ids", UINT, &mut d.num_ids)?;
    e.set("data.test_ids", UINT, &mut d.test_ids)?;
    e.set("data.samples_per_id_per_view", UINT, &mut d.samples_per_id_per_view)?;
    e.set("data.grid_rows", UINT, &mut d.grid_rows)?;
    e.set("data.grid_cols", UINT, &mut d.grid_cols)?;
    e.set("data.patch_dim", UINT, &mut d.patch_dim)?;
    e.set("data.k_sig", UINT, &mut d.k_sig)?;
    e.set("data.noise_std", REAL, &mut d.noise_std)?;
    e.set("data.view_offset_scale", REAL, &mut d.view_offset_scale)?;
    e.set_opt("data.seed", UINT, &mut cfg.data_seed)?;
    let mut flag = Flag(cfg.export_data);
    e.set("data.export", BOOL, &mut flag)?;
    cfg.export_data = flag.0;

    let t = &mut cfg.train;
    e.set("train.epochs", UINT, &mut t.epochs)?;
    e.set("train.ids_per_batch", UINT, &mut t.ids_per_batch)?;
    e.set("train.instances_per_id", UINT, &mut t.instances_per_id)?;
    e.set("train.lr_max", REAL, &mut t.lr_max)?;
    e.set("train.lr_min", REAL, &mut t.lr_min)?;
    e.set("train.momentum", REAL, &mut t.momentum)?;
    e.set_opt("train.max_steps", UINT, &mut t.max_steps)?;

    e.set("loss.view", REAL, &mut cfg.loss.view)?;
    e.set("loss.orth", REAL, &mut cfg.loss.orth)?;

    e.set_list("ablate.heads", "unsigned integers", &mut cfg.ablation.heads)?;
    e.set_list("ablate.k", "unsigned integers", &mut cfg.ablation.k)?;
    e.set_list("ablate.positions", "positions", &mut cfg.ablation.positions)?;

    if let Some((key, entry)) = e.map.first() {
        return Err(Error::Parse {
            line: entry.line,
            message: format!("unknown key {key}"),
        });
    }
    cfg.set_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
