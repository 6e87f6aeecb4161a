//! Parameter tree shared by stored weights (`T = Tensor`) and tape-bound
//! variables (`T = Var`).
//!
//! Leaves are visited in a fixed order with dotted names, e.g.
//! `stages.2.blocks.1.mlp.fc1.weight`. Checkpoints, optimizers and partial
//! loading all key off those names.

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: T,
    pub beta: T,
}

/// The norm-plus-mixer half of a block, in training or deploy form.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenSubBlock<T> {
    Train {
        norm1: NormParams<T>,
        mixer: Vec<(&'static str, T)>,
    },
    /// Norm whose affine already absorbed the mixer.
    Deploy { norm_reparam: NormParams<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub token: TokenSubBlock<T>,
    pub norm2: NormParams<T>,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
    pub layer_scale_1: T,
    pub layer_scale_2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    pub embed_weight: T,
    pub embed_bias: T,
    pub blocks: Vec<BlockParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub stages: Vec<StageParams<T>>,
    pub head_norm: NormParams<T>,
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> NormParams<T> {
    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<NormParams<U>, E> {
        Ok(NormParams {
            gamma: f(&format!("{prefix}.weight"), &self.gamma)?,
            beta: f(&format!("{prefix}.bias"), &self.beta)?,
        })
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.gamma);
        f(&format!("{prefix}.bias"), &mut self.beta);
    }
}

impl<T> BlockParams<T> {
    pub fn is_deployed(&self) -> bool {
        matches!(self.token, TokenSubBlock::Deploy { .. })
    }

    /// Mixer parameters, empty for deployed blocks.
    pub fn mixer_params(&self) -> Vec<&T> {
        match &self.token {
            TokenSubBlock::Train { mixer, .. } => mixer.iter().map(|(_, v)| v).collect(),
            TokenSubBlock::Deploy { .. } => Vec::new(),
        }
    }

    fn try_map<U, E>(&self, p: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<BlockParams<U>, E> {
        let token = match &self.token {
            TokenSubBlock::Train { norm1, mixer } => TokenSubBlock::Train {
                norm1: norm1.try_map(&format!("{p}.norm1"), f)?,
                mixer: mixer
                    .iter()
                    .map(|(name, v)| Ok((*name, f(&format!("{p}.mixer.{name}"), v)?)))
                    .collect::<Result<_, E>>()?,
            },
            TokenSubBlock::Deploy { norm_reparam } => TokenSubBlock::Deploy {
                norm_reparam: norm_reparam.try_map(&format!("{p}.norm_reparam"), f)?,
            },
        };
        Ok(BlockParams {
            token,
            norm2: self.norm2.try_map(&format!("{p}.norm2"), f)?,
            fc1_weight: f(&format!("{p}.mlp.fc1.weight"), &self.fc1_weight)?,
            fc1_bias: f(&format!("{p}.mlp.fc1.bias"), &self.fc1_bias)?,
            fc2_weight: f(&format!("{p}.mlp.fc2.weight"), &self.fc2_weight)?,
            fc2_bias: f(&format!("{p}.mlp.fc2.bias"), &self.fc2_bias)?,
            layer_scale_1: f(&format!("{p}.layer_scale_1"), &self.layer_scale_1)?,
            layer_scale_2: f(&format!("{p}.layer_scale_2"), &self.layer_scale_2)?,
        })
    }

    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(&str, &mut T)) {
        match &mut self.token {
            TokenSubBlock::Train { norm1, mixer } => {
                norm1.visit_mut(&format!("{p}.norm1"), f);
                for (name, v) in mixer.iter_mut() {
                    f(&format!("{p}.mixer.{name}"), v);
                }
            }
            TokenSubBlock::Deploy { norm_reparam } => norm_reparam.visit_mut(&format!("{p}.norm_reparam"), f),
        }
        self.norm2.visit_mut(&format!("{p}.norm2"), f);
        f(&format!("{p}.mlp.fc1.weight"), &mut self.fc1_weight);
        f(&format!("{p}.mlp.fc1.bias"), &mut self.fc1_bias);
        f(&format!("{p}.mlp.fc2.weight"), &mut self.fc2_weight);
        f(&format!("{p}.mlp.fc2.bias"), &mut self.fc2_bias);
        f(&format!("{p}.layer_scale_1"), &mut self.layer_scale_1);
        f(&format!("{p}.layer_scale_2"), &mut self.layer_scale_2);
    }
}

impl<T> ModelParams<T> {
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stages.{i}");
            let embed_weight = f(&format!("{p}.embed.weight"), &s.embed_weight)?;
            let embed_bias = f(&format!("{p}.embed.bias"), &s.embed_bias)?;
            let blocks = s
                .blocks
                .iter()
                .enumerate()
                .map(|(j, b)| b.try_map(&format!("{p}.blocks.{j}"), &mut f))
                .collect::<Result<_, E>>()?;
            stages.push(StageParams {
                embed_weight,
                embed_bias,
                blocks,
            });
        }
        Ok(ModelParams {
            stages,
            head_norm: self.head_norm.try_map("head.norm", &mut f)?,
            head_weight: f("head.fc.weight", &self.head_weight)?,
            head_bias: f("head.fc.bias", &self.head_bias)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.try_map::<U, std::convert::Infallible>(|n, v| Ok(f(n, v)))
            .unwrap_or_else(|never| match never {})
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = format!("stages.{i}");
            f(&format!("{p}.embed.weight"), &mut s.embed_weight);
            f(&format!("{p}.embed.bias"), &mut s.embed_bias);
            for (j, b) in s.blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("{p}.blocks.{j}"), &mut f);
            }
        }
        self.head_norm.visit_mut("head.norm", &mut f);
        f("head.fc.weight", &mut self.head_weight);
        f("head.fc.bias", &mut self.head_bias);
    }

    /// Leaves in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        let _ = self.map(|n, _| out.push(n.to_string()));
        let refs = self.leaves();
        out.into_iter().zip(refs).collect()
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out: Vec<&T> = Vec::new();
        for s in &self.stages {
            out.push(&s.embed_weight);
            out.push(&s.embed_bias);
            for b in &s.blocks {
                match &b.token {
                    TokenSubBlock::Train { norm1, mixer } => {
                        out.push(&norm1.gamma);
                        out.push(&norm1.beta);
                        out.extend(mixer.iter().map(|(_, v)| v));
                    }
                    TokenSubBlock::Deploy { norm_reparam } => {
                        out.push(&norm_reparam.gamma);
                        out.push(&norm_reparam.beta);
                    }
                }
                out.extend([
                    &b.norm2.gamma,
                    &b.norm2.beta,
                    &b.fc1_weight,
                    &b.fc1_bias,
                    &b.fc2_weight,
                    &b.fc2_bias,
                    &b.layer_scale_1,
                    &b.layer_scale_2,
                ]);
            }
        }
        out.extend([&self.head_norm.gamma, &self.head_norm.beta, &self.head_weight, &self.head_bias]);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.embed_weight);
            out.push(&mut s.embed_bias);
            for b in &mut s.blocks {
                match &mut b.token {
                    TokenSubBlock::Train { norm1, mixer } => {
                        out.push(&mut norm1.gamma);
                        out.push(&mut norm1.beta);
                        out.extend(mixer.iter_mut().map(|(_, v)| v));
                    }
                    TokenSubBlock::Deploy { norm_reparam } => {
                        out.push(&mut norm_reparam.gamma);
                        out.push(&mut norm_reparam.beta);
                    }
                }
                out.push(&mut b.norm2.gamma);
                out.push(&mut b.norm2.beta);
                out.push(&mut b.fc1_weight);
                out.push(&mut b.fc1_bias);
                out.push(&mut b.fc2_weight);
                out.push(&mut b.fc2_bias);
                out.push(&mut b.layer_scale_1);
                out.push(&mut b.layer_scale_2);
            }
        }
        out.push(&mut self.head_norm.gamma);
        out.push(&mut self.head_norm.beta);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockParams<T>> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }
}
