//! Network architecture descriptions and their key-value serialization.

use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Vanilla,
    Deformable,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Vanilla => "vanilla",
            AttentionKind::Deformable => "deformable",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(AttentionKind::Vanilla),
            "deformable" => Ok(AttentionKind::Deformable),
            other => Err(Error::config(format!("unknown attention kind `{other}`"))),
        }
    }
}

/// Architecture of a propagation network.
///
/// The encoder is a stack of 3×3 convolutions (each followed by GELU) whose
/// strides multiply to 4; the last channel count is the model width used by
/// every propagation block. `distill_block` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub blocks: Vec<AttentionKind>,
    pub id_dim: usize,
    pub n_max: usize,
    /// Output channels of the three decoder convolutions (8×8, 16×16, 32×32 stages).
    pub decoder_channels: [usize; 3],
    pub offset_groups: usize,
    pub grid_factor: usize,
    pub offset_kernel: usize,
    pub distill_block: usize,
    /// Short-term window radius in tokens (1 → 3×3).
    pub window_radius: usize,
    pub memory_interval: usize,
    pub memory_capacity: usize,
}

impl NetworkSpec {
    /// Three vanilla blocks on a 16→32→32 encoder.
    pub fn teacher() -> Self {
        NetworkSpec {
            name: "teacher".into(),
            encoder_channels: vec![16, 32, 32],
            encoder_strides: vec![2, 2, 1],
            blocks: vec![AttentionKind::Vanilla; 3],
            id_dim: 16,
            n_max: 4,
            decoder_channels: [32, 16, 8],
            offset_groups: 4,
            grid_factor: 1,
            offset_kernel: 5,
            distill_block: 3,
            window_radius: 1,
            memory_interval: 5,
            memory_capacity: 4,
        }
    }

    /// One gated deformable block on an 8→16 encoder.
    pub fn student() -> Self {
        NetworkSpec {
            name: "student".into(),
            encoder_channels: vec![8, 16],
            encoder_strides: vec![2, 2],
            blocks: vec![AttentionKind::Deformable],
            decoder_channels: [16, 8, 8],
            distill_block: 1,
            ..Self::teacher()
        }
    }

    /// The student with its deformable block replaced by a vanilla one.
    pub fn student_vanilla() -> Self {
        NetworkSpec {
            name: "student-vanilla".into(),
            blocks: vec![AttentionKind::Vanilla],
            ..Self::student()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "teacher" => Ok(Self::teacher()),
            "student" => Ok(Self::student()),
            "student-vanilla" => Ok(Self::student_vanilla()),
            other => Err(Error::config(format!("unknown network spec `{other}`"))),
        }
    }

    pub fn width(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn downsample(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    /// Attention config of a deformable stage in this network.
    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            groups: self.offset_groups,
            grid_factor: self.grid_factor,
            offset_kernel: self.offset_kernel,
            ..AttentionConfig::uniform(self.width(), self.offset_groups, self.grid_factor)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_strides.len() {
            return Err(Error::config(
                "encoder channel and stride lists must be nonempty and equal length",
            ));
        }
        if self.downsample() != 4 {
            return Err(Error::config(format!(
                "encoder strides must multiply to 4, got {}",
                self.downsample()
            )));
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .any(|&c| c == 0)
        {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("at least one propagation block is required"));
        }
        if self.distill_block == 0 || self.distill_block > self.blocks.len() {
            return Err(Error::config(format!(
                "distill block {} outside 1..={}",
                self.distill_block,
                self.blocks.len()
            )));
        }
        if self.n_max == 0 || self.id_dim == 0 {
            return Err(Error::config("n_max and id_dim must be positive"));
        }
        if self.memory_interval == 0 || self.memory_capacity == 0 {
            return Err(Error::config("memory interval and capacity must be positive"));
        }
        if self.blocks.contains(&AttentionKind::Deformable) {
            self.attention_config().validate()?;
            if !self.id_dim.is_multiple_of(self.offset_groups) {
                return Err(Error::config(format!(
                    "id_dim {} not divisible by {} offset groups",
                    self.id_dim, self.offset_groups
                )));
            }
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let blocks = self.blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s += &format!("name = {}\n", self.name);
        s += &format!("encoder_channels = {}\n", list(&self.encoder_channels));
        s += &format!("encoder_strides = {}\n", list(&self.encoder_strides));
        s += &format!("blocks = {blocks}\n");
        s += &format!("id_dim = {}\n", self.id_dim);
        s += &format!("n_max = {}\n", self.n_max);
        s += &format!("decoder_channels = {}\n", list(&self.decoder_channels));
        s += &format!("offset_groups = {}\n", self.offset_groups);
        s += &format!("grid_factor = {}\n", self.grid_factor);
        s += &format!("offset_kernel = {}\n", self.offset_kernel);
        s += &format!("distill_block = {}\n", self.distill_block);
        s += &format!("window_radius = {}\n", self.window_radius);
        s += &format!("memory_interval = {}\n", self.memory_interval);
        s += &format!("memory_capacity = {}\n", self.memory_capacity);
        s
    }

    /// Parses the output of [`NetworkSpec::to_kv`]. Every key is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("spec line without `=`: {line}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::config(format!("spec is missing `{k}`")))
        };
        let num = |k: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| Error::config(format!("spec key `{k}`: `{v}` is not an integer")))
        };
        let list =
            |k: &str, v: String| -> Result<Vec<usize>> { v.split(',').map(|x| num(k, x.trim().to_string())).collect() };

        let name = take("name")?;
        let encoder_channels = list("encoder_channels", take("encoder_channels")?)?;
        let encoder_strides = list("encoder_strides", take("encoder_strides")?)?;
        let blocks = take("blocks")?
            .split(',')
            .map(|b| b.trim().parse())
            .collect::<Result<Vec<AttentionKind>>>()?;
        let id_dim = num("id_dim", take("id_dim")?)?;
        let n_max = num("n_max", take("n_max")?)?;
        let dec = list("decoder_channels", take("decoder_channels")?)?;
        let decoder_channels: [usize; 3] = dec
            .try_into()
            .map_err(|_| Error::config("decoder_channels needs exactly three entries"))?;
        let spec = NetworkSpec {
            name,
            encoder_channels,
            encoder_strides,
            blocks,
            id_dim,
            n_max,
            decoder_channels,
            offset_groups: num("offset_groups", take("offset_groups")?)?,
            grid_factor: num("grid_factor", take("grid_factor")?)?,
            offset_kernel: num("offset_kernel", take("offset_kernel")?)?,
            distill_block: num("distill_block", take("distill_block")?)?,
            window_radius: num("window_radius", take("window_radius")?)?,
            memory_interval: num("memory_interval", take("memory_interval")?)?,
            memory_capacity: num("memory_capacity", take("memory_capacity")?)?,
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::config(format!("unknown spec key `{k}`")));
        }
        spec.validate()?;
        Ok(spec)
    }
}
