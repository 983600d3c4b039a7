//! Merges command-line flags over a TOML config file over defaults.

use std::fs;
use std::path::{Path, PathBuf};

use flashsvd_core::factorizer::HeadMode;
use flashsvd_core::memtier::DEFAULT_SRAM_BUDGET;
use flashsvd_core::{ExecMode, Geometry, TilePlan};
use serde::Deserialize;

use crate::args::Common;
use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_REPS: usize = 3;
pub const DEFAULT_PEAK_FLOPS: f64 = 1e13;
pub const DEFAULT_BETA: f64 = 1e12;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    tile_bm: Option<usize>,
    tile_br: Option<usize>,
    tile_bdf: Option<usize>,
    sram_budget: Option<u64>,
    mode: Option<OneOrMany<ExecMode>>,
    rank: Option<OneOrMany<usize>>,
    heads: Option<usize>,
    groups: Option<usize>,
    d_model: Option<usize>,
    d_ff: Option<usize>,
    layers: Option<usize>,
    batch: Option<OneOrMany<usize>>,
    seqlen: Option<OneOrMany<usize>>,
    reps: Option<usize>,
    peak_flops: Option<f64>,
    beta: Option<f64>,
}

fn read_config(path: &Path) -> CliResult<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub plan: TilePlan,
    pub modes: Vec<ExecMode>,
    pub ranks: Vec<usize>,
    pub heads: usize,
    pub groups: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub batches: Vec<usize>,
    pub seqlens: Vec<usize>,
    pub reps: usize,
    pub peak_flops: f64,
    pub beta: f64,
}

fn pick_list<T>(flag: Vec<T>, file: Option<OneOrMany<T>>, default: Vec<T>) -> Vec<T> {
    if !flag.is_empty() {
        flag
    } else {
        file.map(OneOrMany::into_vec).unwrap_or(default)
    }
}

impl Settings {
    /// `default_modes` applies when neither the flags nor the file name a mode.
    pub fn resolve(common: Common, default_modes: &[ExecMode]) -> CliResult<Self> {
        let file = match &common.config {
            Some(p) => read_config(p)?,
            None => FileConfig::default(),
        };
        let heads = common.heads.or(file.heads).unwrap_or(12);
        let defaults = TilePlan::default();
        let s = Settings {
            seed: common.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            out: common.out.or(file.out),
            plan: TilePlan::new(
                common.tile_bm.or(file.tile_bm).unwrap_or(defaults.block_m),
                common.tile_br.or(file.tile_br).unwrap_or(defaults.block_r),
                common.tile_bdf.or(file.tile_bdf).unwrap_or(defaults.block_df),
            )
            .with_budget(common.sram_budget.or(file.sram_budget).unwrap_or(DEFAULT_SRAM_BUDGET)),
            modes: pick_list(common.mode, file.mode, default_modes.to_vec()),
            ranks: pick_list(common.rank, file.rank, vec![64]),
            heads,
            groups: common.groups.or(file.groups).unwrap_or(heads),
            d_model: common.d_model.or(file.d_model).unwrap_or(768),
            d_ff: common.d_ff.or(file.d_ff).unwrap_or(3072),
            layers: common.layers.or(file.layers).unwrap_or(1),
            batches: pick_list(common.batch, file.batch, vec![1]),
            seqlens: pick_list(common.seqlen, file.seqlen, vec![128]),
            reps: file.reps.unwrap_or(DEFAULT_REPS),
            peak_flops: file.peak_flops.unwrap_or(DEFAULT_PEAK_FLOPS),
            beta: file.beta.unwrap_or(DEFAULT_BETA),
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> CliResult<()> {
        for (name, list) in [
            ("rank", &self.ranks),
            ("batch", &self.batches),
            ("seqlen", &self.seqlens),
        ] {
            if list.is_empty() || list.contains(&0) {
                return Err(CliError::Config(format!("`{name}` values must be positive")));
            }
        }
        if self.modes.is_empty() {
            return Err(CliError::Config("at least one mode is required".into()));
        }
        let p = &self.plan;
        if p.block_m == 0 || p.block_r == 0 || p.block_df == 0 {
            return Err(CliError::Config("tile sizes must be positive".into()));
        }
        for g in self.geometries() {
            g.validate()?;
            self.head_mode().validate(g.d_model, g.heads)?;
        }
        Ok(())
    }

    /// Ranks must fit the factor widths before any weights are built.
    pub fn check_factorable(&self) -> CliResult<()> {
        let width = (self.d_model / self.groups).min(self.d_ff);
        match self.ranks.iter().find(|&&r| r > width) {
            Some(r) => Err(CliError::Config(format!(
                "rank {r} exceeds the factor width {width} (d_model / groups, capped by d_ff)"
            ))),
            None => Ok(()),
        }
    }

    pub fn head_mode(&self) -> HeadMode {
        HeadMode::from_groups(self.groups, self.heads)
    }

    /// Every `(batch, seqlen, rank)` combination, in that nesting order.
    pub fn geometries(&self) -> Vec<Geometry> {
        let mut out = Vec::new();
        for &batch in &self.batches {
            for &seq_len in &self.seqlens {
                for &rank in &self.ranks {
                    out.push(Geometry {
                        batch,
                        seq_len,
                        d_model: self.d_model,
                        d_ff: self.d_ff,
                        heads: self.heads,
                        groups: self.groups,
                        rank,
                        layers: self.layers,
                    });
                }
            }
        }
        out
    }

    /// The single geometry for commands that do not sweep.
    pub fn single_geometry(&self) -> CliResult<Geometry> {
        match self.geometries().as_slice() {
            [g] => Ok(*g),
            _ => Err(CliError::Config(
                "this command takes a single value for --batch, --seqlen and --rank".into(),
            )),
        }
    }

    pub fn single_mode(&self) -> CliResult<ExecMode> {
        match self.modes.as_slice() {
            [m] => Ok(*m),
            _ => Err(CliError::Config("this command takes a single --mode".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_are_bert_base() {
        let s = Settings::resolve(Common::default(), &[ExecMode::FlashV1]).unwrap();
        let g = s.single_geometry().unwrap();
        assert_eq!((g.d_model, g.d_ff, g.heads, g.groups, g.rank), (768, 3072, 12, 12, 64));
        assert_eq!(s.seed, 42);
        assert_eq!(s.plan, TilePlan::default());
    }

    #[test]
    fn flags_override_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "seed = 7\nrank = [4, 8]\nd_model = 64\nd_ff = 128\nheads = 4\nmode = \"naive\"\nreps = 5"
        )
        .unwrap();
        let common = Common {
            config: Some(f.path().to_path_buf()),
            seed: Some(9),
            ..Common::default()
        };
        let s = Settings::resolve(common, &[ExecMode::FlashV1]).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.ranks, [4, 8]);
        assert_eq!(s.modes, [ExecMode::NaiveLowRank]);
        assert_eq!(s.reps, 5);
        assert!(s.single_geometry().is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let zero_rank = Common {
            rank: vec![0],
            ..Common::default()
        };
        assert!(matches!(
            Settings::resolve(zero_rank, &[ExecMode::Dense]),
            Err(CliError::Config(_))
        ));
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "colour = 3").unwrap();
        let unknown = Common {
            config: Some(f.path().to_path_buf()),
            ..Common::default()
        };
        assert!(matches!(
            Settings::resolve(unknown, &[ExecMode::Dense]),
            Err(CliError::Config(_))
        ));
        let wide = Common {
            rank: vec![65],
            ..Common::default()
        };
        let s = Settings::resolve(wide, &[ExecMode::Dense]).unwrap();
        assert!(matches!(s.check_factorable(), Err(CliError::Config(_))));
    }
}
