//! Temporal filtering blocks applied to the latent sequence: dilated causal
//! convolution groups (TCM) interleaved with group-wise GRUs. Every block is
//! shape preserving ([B, T, C] in and out) and wraps its body in a residual
//! connection, so blocks can be stacked in any order.

use crate::nn::layers::{
    Conv1x1Layer, DepthwiseLayer, DepthwiseState, GruLayer, GruState, LayerNormLayer, PReluLayer,
};
use crate::nn::params::{ParamStore, Session};
use crate::nn::NodeId;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One temporal block in a stack description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockSpec {
    /// A run of residual dilated-conv blocks sharing one bottleneck width.
    Tcm {
        dilations: Vec<usize>,
        bottleneck: usize,
        kernel: usize,
    },
    /// Group-wise GRU: channels split into `groups` independent recurrences.
    GGru { groups: usize },
}

impl BlockSpec {
    pub fn tcm_default() -> Self {
        BlockSpec::Tcm {
            dilations: vec![1, 2, 4, 8],
            bottleneck: 64,
            kernel: 3,
        }
    }

    pub fn ggru_default() -> Self {
        BlockSpec::GGru { groups: 4 }
    }
}

// ---------------------------------------------------------------------------
// TCM

/// conv1x1 down to the bottleneck, PReLU + layer norm, dilated depthwise
/// conv, PReLU + layer norm, conv1x1 back up, plus the residual.
#[derive(Debug, Clone)]
pub struct TcmBlock {
    conv_in: Conv1x1Layer,
    prelu1: PReluLayer,
    ln1: LayerNormLayer,
    dw: DepthwiseLayer,
    prelu2: PReluLayer,
    ln2: LayerNormLayer,
    conv_out: Conv1x1Layer,
}

#[derive(Debug, Clone)]
pub struct TcmBlockState {
    dw: DepthwiseState,
}

impl TcmBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        bottleneck: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv_in: Conv1x1Layer::new(store, rng, &format!("{name}.conv_in"), channels, bottleneck)?,
            prelu1: PReluLayer::new(store, &format!("{name}.prelu1"), bottleneck)?,
            ln1: LayerNormLayer::new(store, &format!("{name}.ln1"), bottleneck)?,
            dw: DepthwiseLayer::new(store, rng, &format!("{name}.dw"), kernel, bottleneck, dilation)?,
            prelu2: PReluLayer::new(store, &format!("{name}.prelu2"), bottleneck)?,
            ln2: LayerNormLayer::new(store, &format!("{name}.ln2"), bottleneck)?,
            conv_out: Conv1x1Layer::new(store, rng, &format!("{name}.conv_out"), bottleneck, channels)?,
        })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.conv_in.forward(sess, store, x)?;
        let h = self.prelu1.forward(sess, store, h)?;
        let h = self.ln1.forward(sess, store, h)?;
        let h = self.dw.forward(sess, store, h)?;
        let h = self.prelu2.forward(sess, store, h)?;
        let h = self.ln2.forward(sess, store, h)?;
        let h = self.conv_out.forward(sess, store, h)?;
        sess.tape.add(x, h)
    }

    pub fn state(&self) -> TcmBlockState {
        TcmBlockState {
            dw: self.dw.state(),
        }
    }

    pub fn eval_frame(&self, store: &ParamStore, x: &[f64], st: &mut TcmBlockState) -> Vec<f64> {
        let h = self.conv_in.eval_rows(store, x);
        let h = self.prelu1.eval_rows(store, &h);
        let h = self.ln1.eval_rows(store, &h);
        let h = self.dw.eval_frame(store, &h, &mut st.dw);
        let h = self.prelu2.eval_rows(store, &h);
        let h = self.ln2.eval_rows(store, &h);
        let h = self.conv_out.eval_rows(store, &h);
        x.iter().zip(&h).map(|(a, b)| a + b).collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_in.param_count()
            + self.prelu1.param_count()
            + self.ln1.param_count()
            + self.dw.param_count()
            + self.prelu2.param_count()
            + self.ln2.param_count()
            + self.conv_out.param_count()
    }

    /// Past frames the block can see at its output.
    pub fn lookback(&self) -> usize {
        (self.dw.kt - 1) * self.dw.dilation
    }
}

/// A run of TCM blocks with increasing dilations.
#[derive(Debug, Clone)]
pub struct TcmGroup {
    pub blocks: Vec<TcmBlock>,
}

#[derive(Debug, Clone)]
pub struct TcmGroupState {
    blocks: Vec<TcmBlockState>,
}

impl TcmGroup {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        bottleneck: usize,
        kernel: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::Config("tcm group needs at least one dilation".into()));
        }
        let blocks = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                TcmBlock::new(
                    store,
                    rng,
                    &format!("{name}.b{i}"),
                    channels,
                    bottleneck,
                    kernel,
                    d,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(sess, store, h)?;
        }
        Ok(h)
    }

    pub fn state(&self) -> TcmGroupState {
        TcmGroupState {
            blocks: self.blocks.iter().map(|b| b.state()).collect(),
        }
    }

    pub fn eval_frame(&self, store: &ParamStore, x: &[f64], st: &mut TcmGroupState) -> Vec<f64> {
        let mut h = x.to_vec();
        for (b, s) in self.blocks.iter().zip(&mut st.blocks) {
            h = b.eval_frame(store, &h, s);
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    pub fn lookback(&self) -> usize {
        self.blocks.iter().map(|b| b.lookback()).sum()
    }
}

// ---------------------------------------------------------------------------
// Group-wise GRU

/// Channels are split into contiguous groups, each with its own GRU whose
/// hidden size equals the group width; outputs are re-concatenated and a
/// residual is added. `groups = 1` degenerates to a full GRU.
#[derive(Debug, Clone)]
pub struct GGruBlock {
    pub grus: Vec<GruLayer>,
    pub channels: usize,
    pub group_width: usize,
}

#[derive(Debug, Clone)]
pub struct GGruState {
    grus: Vec<GruState>,
}

impl GGruBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        let width = channels / groups;
        let grus = (0..groups)
            .map(|g| GruLayer::new(store, rng, &format!("{name}.g{g}"), width, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grus,
            channels,
            group_width: width,
        })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = self.group_width;
        let mut merged: Option<NodeId> = None;
        for (g, gru) in self.grus.iter().enumerate() {
            let part = sess.tape.slice_last(x, g * w, (g + 1) * w)?;
            let out = gru.forward(sess, store, part)?;
            merged = Some(match merged {
                None => out,
                Some(acc) => sess.tape.concat_last(acc, out)?,
            });
        }
        sess.tape.add(x, merged.expect("at least one group"))
    }

    pub fn state(&self) -> GGruState {
        GGruState {
            grus: self.grus.iter().map(|g| g.state()).collect(),
        }
    }

    pub fn eval_frame(&self, store: &ParamStore, x: &[f64], st: &mut GGruState) -> Vec<f64> {
        let w = self.group_width;
        let mut out = Vec::with_capacity(self.channels);
        for (g, gru) in self.grus.iter().enumerate() {
            out.extend(gru.eval_step(store, &x[g * w..(g + 1) * w], &mut st.grus[g]));
        }
        for (o, xv) in out.iter_mut().zip(x) {
            *o += xv;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.grus.iter().map(|g| g.param_count()).sum()
    }
}

// ---------------------------------------------------------------------------
// Stacks

#[derive(Debug, Clone)]
pub enum TemporalBlock {
    Tcm(TcmGroup),
    GGru(GGruBlock),
}

#[derive(Debug, Clone)]
pub enum TemporalBlockState {
    Tcm(TcmGroupState),
    GGru(GGruState),
}

impl TemporalBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        spec: &BlockSpec,
    ) -> Result<Self> {
        Ok(match spec {
            BlockSpec::Tcm {
                dilations,
                bottleneck,
                kernel,
            } => TemporalBlock::Tcm(TcmGroup::new(
                store, rng, name, channels, *bottleneck, *kernel, dilations,
            )?),
            BlockSpec::GGru { groups } => {
                TemporalBlock::GGru(GGruBlock::new(store, rng, name, channels, *groups)?)
            }
        })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        match self {
            TemporalBlock::Tcm(t) => t.forward(sess, store, x),
            TemporalBlock::GGru(g) => g.forward(sess, store, x),
        }
    }

    pub fn state(&self) -> TemporalBlockState {
        match self {
            TemporalBlock::Tcm(t) => TemporalBlockState::Tcm(t.state()),
            TemporalBlock::GGru(g) => TemporalBlockState::GGru(g.state()),
        }
    }

    pub fn eval_frame(
        &self,
        store: &ParamStore,
        x: &[f64],
        st: &mut TemporalBlockState,
    ) -> Vec<f64> {
        match (self, st) {
            (TemporalBlock::Tcm(t), TemporalBlockState::Tcm(s)) => t.eval_frame(store, x, s),
            (TemporalBlock::GGru(g), TemporalBlockState::GGru(s)) => g.eval_frame(store, x, s),
            _ => panic!("temporal block state kind mismatch"),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TemporalBlock::Tcm(t) => t.param_count(),
            TemporalBlock::GGru(g) => g.param_count(),
        }
    }
}

/// A sequence of shape-preserving temporal blocks.
#[derive(Debug, Clone)]
pub struct TemporalStack {
    pub blocks: Vec<TemporalBlock>,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct TemporalStackState {
    blocks: Vec<TemporalBlockState>,
}

impl TemporalStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        specs: &[BlockSpec],
    ) -> Result<Self> {
        let blocks = specs
            .iter()
            .enumerate()
            .map(|(i, s)| TemporalBlock::new(store, rng, &format!("{name}.t{i}"), channels, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, channels })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(sess, store, h)?;
        }
        Ok(h)
    }

    pub fn state(&self) -> TemporalStackState {
        TemporalStackState {
            blocks: self.blocks.iter().map(|b| b.state()).collect(),
        }
    }

    pub fn eval_frame(
        &self,
        store: &ParamStore,
        x: &[f64],
        st: &mut TemporalStackState,
    ) -> Vec<f64> {
        let mut h = x.to_vec();
        for (b, s) in self.blocks.iter().zip(&mut st.blocks) {
            h = b.eval_frame(store, &h, s);
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }
}
