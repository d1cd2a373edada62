use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitConfig {
    pub width: usize,
    pub depth: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub patch: usize,
    pub image: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub qk_norm: bool,
    pub parallel_block: bool,
}

/// Reference sizes for the named presets, in millions of parameters.
pub const REFERENCE_PARAMS_M: [(&str, f64); 3] =
    [("vit_g", 1843.0), ("vit_e", 3926.0), ("vit_22b", 21743.0)];

impl VitConfig {
    fn preset_dims(width: usize, depth: usize, mlp_dim: usize, num_heads: usize) -> Self {
        VitConfig {
            width,
            depth,
            mlp_dim,
            num_heads,
            patch: 14,
            image: 224,
            channels: 3,
            num_classes: 30_000,
            qk_norm: true,
            parallel_block: true,
        }
    }

    pub fn vit_g() -> Self {
        Self::preset_dims(1664, 48, 8192, 16)
    }

    pub fn vit_e() -> Self {
        Self::preset_dims(1792, 56, 15360, 16)
    }

    pub fn vit_22b() -> Self {
        Self::preset_dims(6144, 48, 24576, 48)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit_g" => Ok(Self::vit_g()),
            "vit_e" => Ok(Self::vit_e()),
            "vit_22b" => Ok(Self::vit_22b()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected vit_g, vit_e or vit_22b)"
            ))),
        }
    }

    /// Small model used by tests and toy training.
    pub fn tiny(width: usize, depth: usize, mlp_dim: usize, num_heads: usize) -> Self {
        VitConfig {
            width,
            depth,
            mlp_dim,
            num_heads,
            patch: 4,
            image: 8,
            channels: 3,
            num_classes: 4,
            qk_norm: true,
            parallel_block: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("depth", self.depth),
            ("mlp_dim", self.mlp_dim),
            ("num_heads", self.num_heads),
            ("patch", self.patch),
            ("image", self.image),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by num_heads {}",
                self.width, self.num_heads
            )));
        }
        if self.image % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {} is not divisible by patch {}",
                self.image, self.patch
            )));
        }
        Ok(())
    }
}
