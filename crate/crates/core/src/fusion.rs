//! Self-attention fuser: per time step, merge the modality tokens with learnable
//! fusion tokens and read out the mean of the fusion tokens.

use anticipate_tensor::{ParamId, ParamSet, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{add_param, normal_tensor, Ctx, EncoderBlock, INIT_STD};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Fuser {
    pub blocks: Vec<EncoderBlock>,
    /// `[n_fuse, d]`
    pub fusion_tokens: ParamId,
    /// `[M, d]`
    pub type_embed: ParamId,
    /// `[M, d]`
    pub missing: ParamId,
    pub modalities: usize,
    pub n_fuse: usize,
    pub dim: usize,
    pub missing_tokens: bool,
}

impl Fuser {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        params: &mut ParamSet<F>,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        modalities: usize,
        n_fuse: usize,
        missing_tokens: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_fuse == 0 {
            return Err(Error::Config("the fuser needs at least one fusion token".into()));
        }
        if modalities == 0 {
            return Err(Error::Config("the fuser needs at least one modality".into()));
        }
        let fusion_tokens = add_param(params, format!("{name}.fusion_tokens"), normal_tensor(&[n_fuse, dim], INIT_STD, rng))?;
        let type_embed = add_param(params, format!("{name}.type_embed"), normal_tensor(&[modalities, dim], INIT_STD, rng))?;
        let missing = add_param(params, format!("{name}.missing"), normal_tensor(&[modalities, dim], INIT_STD, rng))?;
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(params, &format!("{name}.block{i}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            fusion_tokens,
            type_embed,
            missing,
            modalities,
            n_fuse,
            dim,
            missing_tokens,
        })
    }

    /// Fuses `G` independent steps.
    ///
    /// `tokens` is `[G, M, d]` (already projected); `present[g * M + m]` flags
    /// whether modality `m` was observed at step `g`. Returns `[G, d]`.
    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, tokens: Var, present: &[bool]) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(tokens);
        let m = self.modalities;
        if shape.len() != 3 || shape[1] != m || shape[2] != self.dim {
            return Err(Error::Contract(format!("fuser expects [G, {m}, {}] tokens, got {shape:?}", self.dim)));
        }
        let g = shape[0];
        if present.len() != g * m {
            return Err(Error::Contract(format!("{} presence flags for {g} steps of {m} modalities", present.len())));
        }
        let types = ctx.p(self.type_embed);
        let seq = if present.iter().all(|&p| p) {
            t.add(tokens, types)?
        } else if self.missing_tokens {
            let keep: Vec<F> = present.iter().map(|&p| if p { F::one() } else { F::zero() }).collect();
            let drop: Vec<F> = keep.iter().map(|&k| F::one() - k).collect();
            let keep = t.constant(Tensor::from_vec(vec![g, m, 1], keep));
            let drop = t.constant(Tensor::from_vec(vec![g, m, 1], drop));
            let filled = t.add(t.mul(tokens, keep)?, t.mul(ctx.p(self.missing), drop)?)?;
            t.add(filled, types)?
        } else {
            // without placeholders absent modalities leave the sequence; this needs
            // the same modalities present at every step
            let cols: Vec<usize> = (0..m).filter(|&j| present[j]).collect();
            if (0..g).any(|i| (0..m).any(|j| present[i * m + j] != present[j])) {
                return Err(Error::Contract("per-step presence varies and missing tokens are disabled".into()));
            }
            if cols.is_empty() {
                return Err(Error::Contract("no modality present and missing tokens are disabled".into()));
            }
            let parts = cols
                .iter()
                .map(|&j| Ok(t.add(t.slice(tokens, 1, j, 1)?, t.slice(types, 0, j, 1)?)?))
                .collect::<Result<Vec<_>>>()?;
            t.concat(&parts, 1)?
        };
        let fusion = t.expand(ctx.p(self.fusion_tokens), g);
        let mut x = t.concat(&[fusion, seq], 1)?;
        let Some((last, rest)) = self.blocks.split_last() else {
            return Ok(t.mean(fusion, 1)?);
        };
        for block in rest {
            x = block.forward(ctx, x, None, false)?;
        }
        // only the fusion-token rows of the last layer are read out
        let out = last.forward_prefix(ctx, x, self.n_fuse)?;
        Ok(t.mean(out, 1)?)
    }

    /// All parameter ids, for gradient-flow checks.
    pub fn param_ids(&self, params: &ParamSet<impl Scalar>) -> Vec<ParamId> {
        let mut ids = vec![self.fusion_tokens, self.type_embed, self.missing];
        let prefix = params.name(self.fusion_tokens).trim_end_matches("fusion_tokens").to_string();
        ids.extend(params.ids().filter(|&id| params.name(id).starts_with(&format!("{prefix}block"))));
        ids
    }
}
