//! The dictionary-conditioned denoiser.
//!
//! A 30x30 noisy signal image passes through a dilated-conv/residual encoder
//! whose latent feeds two heads at once: a decoder that produces the denoised
//! image, and a regression branch that predicts the signal's sparse code over
//! a fixed dictionary. The code's dictionary reconstruction is projected
//! through a 1x1 conv and concatenated into the decoder right before its
//! final convolution, so the prior shapes the output where it matters most.
//!
//! All tape-level computation runs on globally normalized values (raw mV
//! times [`NetConfig::norm_scale`]); the public [`forward`] wrapper converts
//! from and back to raw units. Training minimizes
//! `10 * mean|code - code_truth| + 1 * mean((out - clean)^2)`.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::rng::{stream, Ns};
use crate::sim::Dataset;
use crate::tensor::{BufId, ParamSet, Real, Tape, Tensor4};

/// Weight of the code-regression term in the training loss.
pub const LOSS_ALPHA: f64 = 10.0;
/// Weight of the denoising term in the training loss.
pub const LOSS_BETA: f64 = 1.0;

/// On-disk magic for checkpoint files.
pub const CKPT_MAGIC: [u8; 4] = *b"DPTC";
/// On-disk checkpoint format version.
pub const CKPT_VERSION: u16 = 1;

/// Architecture hyperparameters.
///
/// `width_mult` scales every internal channel count (floor 4); the reference
/// widths correspond to 1.0. `k` is the sparse-code length and must match the
/// dictionary. Inputs of shape `(B, 1, input_side, input_side)` are expected
/// pre-scaled by `norm_scale` at tape level.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub width_mult: f64,
    pub k: usize,
    pub input_side: usize,
    pub norm_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { width_mult: 1.0, k: 64, input_side: 30, norm_scale: 1e-3 }
    }
}

impl NetConfig {
    /// Quarter-width preset for single-machine runs.
    pub fn desk() -> Self {
        Self { width_mult: 0.25, ..Self::default() }
    }

    /// A base channel count scaled by `width_mult`, floored at 4.
    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(4)
    }

    /// Side length after the encoder pool (stride-2, exact halving).
    pub fn latent_side(&self) -> usize {
        self.input_side / 2
    }

    /// Side length after the regression branch's ceil-mode pool.
    pub fn reg_side(&self) -> usize {
        self.latent_side().div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0) || !self.width_mult.is_finite() {
            return Err(Error::invalid("width_mult must be positive and finite"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if self.input_side < 4 || self.input_side % 2 != 0 {
            return Err(Error::invalid("input_side must be even and >= 4"));
        }
        if !(self.norm_scale > 0.0) || !self.norm_scale.is_finite() {
            return Err(Error::invalid("norm_scale must be positive and finite"));
        }
        Ok(())
    }
}

/// Denoised image, predicted codes, and their dictionary reconstruction.
///
/// `denoised` is `(B,1,S,S)` and `dict_recon` `(B,S^2,1,1)`, both in the
/// units of the input that produced them; `code` is `(B,K,1,1)` and lives in
/// the dictionary's (normalized) domain.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub denoised: Tensor4<f32>,
    pub code: Tensor4<f32>,
    pub dict_recon: Tensor4<f32>,
}

/// Tape handles of one forward pass plus labeled intermediate shapes.
pub struct GraphOut {
    pub denoised: BufId,
    pub code: BufId,
    pub dict_recon: BufId,
    /// `(stage, shape)` pairs for architecture contracts.
    pub probes: Vec<(&'static str, [usize; 4])>,
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

fn shape4(dims: &[usize]) -> [usize; 4] {
    let mut s = [1usize; 4];
    for (o, &d) in s.iter_mut().zip(dims) {
        *o = d;
    }
    s
}

fn draw_kaiming(rng: &mut impl rand::Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

fn add_conv(
    ps: &mut ParamSet<f32>,
    rng: &mut impl rand::Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) -> Result<()> {
    let fan_in = ci * k * k;
    ps.add(&format!("{name}.w"), vec![co, ci, k, k], draw_kaiming(rng, fan_in, co * ci * k * k))?;
    ps.add(&format!("{name}.b"), vec![co], vec![0.0; co])?;
    Ok(())
}

fn add_fc(
    ps: &mut ParamSet<f32>,
    rng: &mut impl rand::Rng,
    name: &str,
    m: usize,
    n: usize,
) -> Result<()> {
    ps.add(&format!("{name}.w"), vec![m, n], draw_kaiming(rng, n, m * n))?;
    ps.add(&format!("{name}.b"), vec![m], vec![0.0; m])?;
    Ok(())
}

/// Fresh parameters for `cfg`, drawn in a fixed named order from the
/// parameter-init stream of `seed`: Kaiming fan-in normals for weights,
/// zeros for biases.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let c32 = cfg.channels(32);
    let c64 = cfg.channels(64);
    let c128 = cfg.channels(128);
    let c16 = cfg.channels(16);
    let fc_in = cfg.reg_side() * cfg.reg_side();

    let mut rng = stream(seed, Ns::ParamInit, 0);
    let mut ps = ParamSet::new();
    add_conv(&mut ps, &mut rng, "enc.dconv1", c32, 1, 3)?;
    add_conv(&mut ps, &mut rng, "enc.dconv2", c64, c32, 3)?;
    add_conv(&mut ps, &mut rng, "enc.res1.conv1", c128, c64, 1)?;
    add_conv(&mut ps, &mut rng, "enc.res1.conv3", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "enc.res1.skip", c128, c64, 1)?;
    add_conv(&mut ps, &mut rng, "enc.res2.conv1", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "enc.res2.conv2", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "enc.res3.conv1", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "enc.res3.conv2", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "dec.res1.conv1", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "dec.res1.conv2", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "dec.res2.conv1", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "dec.res2.conv2", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "dec.res3.conv1", c128, c128, 1)?;
    add_conv(&mut ps, &mut rng, "dec.res3.conv3", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "dec.dconv1", c32, c128, 3)?;
    add_conv(&mut ps, &mut rng, "dec.dconv2", c16, c32, 3)?;
    add_conv(&mut ps, &mut rng, "fuse.proj", c16, 1, 1)?;
    add_conv(&mut ps, &mut rng, "dec.final", 1, 2 * c16, 3)?;
    add_conv(&mut ps, &mut rng, "reg.res1.conv1", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "reg.res1.conv2", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "reg.res2.conv1", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "reg.res2.conv2", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "reg.res3.conv1", c128, c128, 1)?;
    add_conv(&mut ps, &mut rng, "reg.res3.conv3", c128, c128, 3)?;
    add_conv(&mut ps, &mut rng, "reg.final", 1, c128, 3)?;
    add_fc(&mut ps, &mut rng, "reg.fc", cfg.k, fc_in)?;
    Ok(ps)
}

// ---------------------------------------------------------------------------
// Forward graph
// ---------------------------------------------------------------------------

fn pbuf<T: Real>(tape: &mut Tape<T>, ps: &ParamSet<T>, name: &str) -> Result<BufId> {
    let slot = ps
        .index_of(name)
        .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))?;
    let p = ps.get(slot);
    tape.param(slot, &p.data, shape4(&p.dims))
}

fn conv_layer<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    name: &str,
    x: BufId,
    dilation: usize,
    relu: bool,
) -> Result<BufId> {
    let w = pbuf(tape, ps, &format!("{name}.w"))?;
    let b = pbuf(tape, ps, &format!("{name}.b"))?;
    tape.conv2d(x, w, b, dilation, relu)
}

/// Two 3x3 convolutions with an identity skip.
fn res_v2<T: Real>(tape: &mut Tape<T>, ps: &ParamSet<T>, prefix: &str, x: BufId) -> Result<BufId> {
    let a = conv_layer(tape, ps, &format!("{prefix}.conv1"), x, 1, true)?;
    let b = conv_layer(tape, ps, &format!("{prefix}.conv2"), a, 1, false)?;
    let s = tape.add(b, x)?;
    tape.relu(s)
}

/// A 1x1 then 3x3 convolution; the skip is a 1x1 projection when the channel
/// count changes, identity otherwise.
fn res_v1<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    prefix: &str,
    x: BufId,
    projected_skip: bool,
) -> Result<BufId> {
    let a = conv_layer(tape, ps, &format!("{prefix}.conv1"), x, 1, true)?;
    let b = conv_layer(tape, ps, &format!("{prefix}.conv3"), a, 1, false)?;
    let skip = if projected_skip {
        conv_layer(tape, ps, &format!("{prefix}.skip"), x, 1, false)?
    } else {
        x
    };
    let s = tape.add(b, skip)?;
    tape.relu(s)
}

/// Builds the full forward graph on `tape` from normalized input `x` of
/// shape `(B,1,S,S)`. `atoms` is the dictionary matrix, row-major `K x S^2`,
/// shared as a constant (codes get gradients; atoms never do).
pub fn build_forward<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    cfg: &NetConfig,
    x: BufId,
    atoms: &Arc<Vec<T>>,
) -> Result<GraphOut> {
    cfg.validate()?;
    let xs = tape.shape(x);
    let side = cfg.input_side;
    if xs[1] != 1 || xs[2] != side || xs[3] != side {
        return Err(Error::invalid(format!(
            "input shape {xs:?} does not match (B,1,{side},{side})"
        )));
    }
    if atoms.len() != cfg.k * side * side {
        return Err(Error::invalid(format!(
            "dictionary matrix has {} values, expected {}x{}",
            atoms.len(),
            cfg.k,
            side * side
        )));
    }
    let mut probes = Vec::new();

    // Encoder.
    let e1 = conv_layer(tape, ps, "enc.dconv1", x, 2, true)?;
    let e2 = conv_layer(tape, ps, "enc.dconv2", e1, 2, true)?;
    let r1 = res_v1(tape, ps, "enc.res1", e2, true)?;
    probes.push(("enc.res1", tape.shape(r1)));
    let p = tape.maxpool2(r1)?;
    probes.push(("enc.pool", tape.shape(p)));
    let z = res_v2(tape, ps, "enc.res2", p)?;
    let z = res_v2(tape, ps, "enc.res3", z)?;
    probes.push(("enc.latent", tape.shape(z)));

    // Regression branch: latent -> pooled residual stack -> codes.
    let q = tape.maxpool2_ceil(z)?;
    probes.push(("reg.pool", tape.shape(q)));
    let q = res_v2(tape, ps, "reg.res1", q)?;
    let q = res_v2(tape, ps, "reg.res2", q)?;
    let q = res_v1(tape, ps, "reg.res3", q, false)?;
    let qf = conv_layer(tape, ps, "reg.final", q, 1, true)?;
    probes.push(("reg.final", tape.shape(qf)));
    let rs = cfg.reg_side();
    let qflat = tape.reshape(qf, [xs[0], rs * rs, 1, 1])?;
    let wfc = pbuf(tape, ps, "reg.fc.w")?;
    let bfc = pbuf(tape, ps, "reg.fc.b")?;
    let code = tape.fc(qflat, wfc, bfc)?;
    probes.push(("reg.code", tape.shape(code)));

    // Dictionary reconstruction of the predicted codes.
    let recon = tape.matmul_const(code, Arc::clone(atoms), side * side)?;
    probes.push(("fuse.recon", tape.shape(recon)));

    // Decoder with the reconstruction fused in before the final conv.
    let d = res_v2(tape, ps, "dec.res1", z)?;
    let d = res_v2(tape, ps, "dec.res2", d)?;
    let u = tape.upsample2(d)?;
    probes.push(("dec.upsample", tape.shape(u)));
    let d = res_v1(tape, ps, "dec.res3", u, false)?;
    let d = conv_layer(tape, ps, "dec.dconv1", d, 2, true)?;
    let d = conv_layer(tape, ps, "dec.dconv2", d, 2, true)?;
    probes.push(("dec.features", tape.shape(d)));
    let rimg = tape.reshape(recon, [xs[0], 1, side, side])?;
    let proj = conv_layer(tape, ps, "fuse.proj", rimg, 1, true)?;
    let cat = tape.concat_c(d, proj)?;
    probes.push(("dec.concat", tape.shape(cat)));
    let denoised = conv_layer(tape, ps, "dec.final", cat, 1, false)?;
    probes.push(("dec.out", tape.shape(denoised)));

    Ok(GraphOut { denoised, code, dict_recon: recon, probes })
}

/// Attaches the training loss to a forward graph:
/// `LOSS_ALPHA * mean|code - a_truth| + LOSS_BETA * mean((out - y_truth)^2)`.
/// Returns `(total, l_regress, l_denoising)` buffer ids.
pub fn build_train_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &GraphOut,
    y_truth: BufId,
    a_truth: BufId,
) -> Result<(BufId, BufId, BufId)> {
    let ys = tape.shape(y_truth);
    let cs = tape.shape(a_truth);
    let l_den = tape.sq_loss(out.denoised, y_truth, 1.0 / ys.iter().product::<usize>() as f64)?;
    let l_reg = tape.abs_loss(out.code, a_truth, 1.0 / cs.iter().product::<usize>() as f64)?;
    let total = tape.weighted_sum(&[(l_reg, LOSS_ALPHA), (l_den, LOSS_BETA)])?;
    Ok((total, l_reg, l_den))
}

/// Value-level training loss on already-computed outputs, in the units of
/// its arguments. Returns `(total, l_regress, l_denoising)`.
pub fn loss_total(
    out: &ForwardOut,
    y_truth: &Tensor4<f32>,
    a_truth: &Tensor4<f32>,
) -> Result<(f64, f64, f64)> {
    if out.denoised.shape() != y_truth.shape() || out.code.shape() != a_truth.shape() {
        return Err(Error::invalid("loss_total: shape mismatch"));
    }
    let l_den = out
        .denoised
        .data()
        .iter()
        .zip(y_truth.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / y_truth.len() as f64;
    let l_reg = out
        .code
        .data()
        .iter()
        .zip(a_truth.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / a_truth.len() as f64;
    Ok((LOSS_ALPHA * l_reg + LOSS_BETA * l_den, l_reg, l_den))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Per-epoch mean training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_regress: f64,
    pub l_denoising: f64,
    pub total: f64,
}

/// A trained model: parameters, architecture, the digest of the dictionary
/// it was trained against, the training curve, and the training seed.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: NetConfig,
    pub params: ParamSet<f32>,
    pub dict_hash: [u8; 32],
    pub train_log: Vec<EpochLog>,
    pub seed: u64,
}

impl Checkpoint {
    /// Refuses dictionaries other than the one trained against.
    pub fn check_dict(&self, dict: &Dictionary) -> Result<()> {
        if dict.source_hash != self.dict_hash {
            return Err(Error::invalid(
                "dictionary digest does not match the checkpoint's training dictionary",
            ));
        }
        if dict.k() != self.cfg.k {
            return Err(Error::invalid(format!(
                "dictionary has {} atoms, checkpoint expects {}",
                dict.k(),
                self.cfg.k
            )));
        }
        Ok(())
    }
}

/// Raw-unit forward pass: scales `x` (raw mV, `(B,1,S,S)`) into the
/// normalized domain, runs the graph, and scales signal-domain outputs back.
pub fn forward(ckpt: &Checkpoint, dict: &Dictionary, x: &Tensor4<f32>) -> Result<ForwardOut> {
    ckpt.check_dict(dict)?;
    let cfg = &ckpt.cfg;
    let side = cfg.input_side;
    if dict.atom_len() != side * side {
        return Err(Error::invalid(format!(
            "dictionary atom length {} does not match {side}x{side} inputs",
            dict.atom_len()
        )));
    }
    let scale = cfg.norm_scale as f32;
    let xn: Vec<f32> = x.data().iter().map(|&v| v * scale).collect();
    let mut tape = Tape::new();
    let xb = tape.leaf(xn, x.shape())?;
    let atoms = Arc::new(dict.atoms().to_vec());
    let g = build_forward(&mut tape, &ckpt.params, cfg, xb, &atoms)?;
    let inv = 1.0 / scale;
    let denoised = Tensor4::from_vec(
        tape.shape(g.denoised),
        tape.value(g.denoised).iter().map(|&v| v * inv).collect(),
    )?;
    let code = Tensor4::from_vec(tape.shape(g.code), tape.value(g.code).to_vec())?;
    let dict_recon = Tensor4::from_vec(
        tape.shape(g.dict_recon),
        tape.value(g.dict_recon).iter().map(|&v| v * inv).collect(),
    )?;
    Ok(ForwardOut { denoised, code, dict_recon })
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Serializes a checkpoint into the versioned `DPTC` binary layout.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.cfg.width_mult.to_le_bytes());
    buf.extend_from_slice(&(ckpt.cfg.k as u32).to_le_bytes());
    buf.extend_from_slice(&(ckpt.cfg.input_side as u32).to_le_bytes());
    buf.extend_from_slice(&ckpt.cfg.norm_scale.to_le_bytes());
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.dict_hash);
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for p in ckpt.params.iter() {
        put_str(&mut buf, &p.name);
        buf.push(p.dims.len() as u8);
        for &d in &p.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ckpt.train_log.len() as u32).to_le_bytes());
    for row in &ckpt.train_log {
        buf.extend_from_slice(&(row.epoch as u32).to_le_bytes());
        buf.extend_from_slice(&row.l_regress.to_le_bytes());
        buf.extend_from_slice(&row.l_denoising.to_le_bytes());
        buf.extend_from_slice(&row.total.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::format("checkpoint file truncated"));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, off: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    let cfg = NetConfig {
        width_mult: r.f64()?,
        k: r.u32()? as usize,
        input_side: r.u32()? as usize,
        norm_scale: r.f64()?,
    };
    cfg.validate()?;
    let seed = r.u64()?;
    let mut dict_hash = [0u8; 32];
    dict_hash.copy_from_slice(r.take(32)?);
    let n_params = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("parameter name is not UTF-8"))?
            .to_string();
        let ndims = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(Error::numeric(format!("parameter {name:?} contains non-finite values")));
            }
            data.push(v);
        }
        params.add(&name, dims, data)?;
    }
    let n_log = r.u32()? as usize;
    let mut train_log = Vec::with_capacity(n_log);
    for _ in 0..n_log {
        train_log.push(EpochLog {
            epoch: r.u32()? as usize,
            l_regress: r.f64()?,
            l_denoising: r.f64()?,
            total: r.f64()?,
        });
    }
    if r.off != buf.len() {
        return Err(Error::format("trailing bytes in checkpoint file"));
    }
    Ok(Checkpoint { cfg, params, dict_hash, train_log, seed })
}

// ---------------------------------------------------------------------------
// Optimizer and trainer
// ---------------------------------------------------------------------------

/// Adam with the usual defaults (0.9 / 0.999 / 1e-8). State vectors follow
/// the parameter set's canonical order.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update from `(slot, grad)` pairs. `lr = 0` leaves parameters
    /// bitwise untouched (the subtracted step is exactly zero).
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[(usize, Vec<f32>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, g) in grads {
            let p = params.get_mut(*slot);
            let m = &mut self.m[*slot];
            let v = &mut self.v[*slot];
            for i in 0..p.data.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data[i] = (p.data[i] as f64 - step) as f32;
            }
        }
    }
}

/// Sums duplicate-slot gradient pairs (a parameter used by several forward
/// passes on one tape yields one pair per pass).
pub fn merge_param_grads<T: Real>(
    n_slots: usize,
    pairs: Vec<(usize, Vec<T>)>,
) -> Vec<(usize, Vec<T>)> {
    let mut acc: Vec<Option<Vec<T>>> = vec![None; n_slots];
    for (slot, g) in pairs {
        match &mut acc[slot] {
            Some(a) => {
                for (x, &y) in a.iter_mut().zip(&g) {
                    *x = *x + y;
                }
            }
            None => acc[slot] = Some(g),
        }
    }
    acc.into_iter()
        .enumerate()
        .filter_map(|(slot, g)| g.map(|g| (slot, g)))
        .collect()
}

/// Optimization schedule. The default mirrors the full-scale recipe
/// (100 epochs, batch 256, lr 1e-3); [`TrainConfig::desk`] is the
/// quarter-width single-machine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch: 256, lr: 1e-3, seed: 0 }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self { epochs: 20, batch: 64, lr: 1e-3, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Rows of a dataset as a normalized `(B,1,S,S)` image batch.
pub fn batch_images(
    data: &Dataset,
    rows: &[usize],
    side: usize,
    norm_scale: f64,
    clean: bool,
) -> Result<Tensor4<f32>> {
    let w = side * side;
    if data.grid.n != w {
        return Err(Error::invalid(format!(
            "signal length {} does not fold into {side}x{side}",
            data.grid.n
        )));
    }
    let scale = norm_scale as f32;
    let mut out = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        let row = if clean {
            data.clean_row(r)
                .ok_or_else(|| Error::invalid("dataset has no clean rows"))?
        } else {
            data.noisy_row(r)
        };
        out.extend(row.iter().map(|&v| v * scale));
    }
    Tensor4::from_vec([rows.len(), 1, side, side], out)
}

/// Trains from scratch on a source dataset against frozen clean-signal codes.
///
/// `codes` must be the dictionary codes of the dataset's clean rows, in row
/// order. Shuffling, initialization and everything downstream derive from
/// `train_cfg.seed`, so the result is a pure function of its arguments.
pub fn train(
    data: &Dataset,
    dict: &Dictionary,
    codes: &crate::dict::Codes,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
) -> Result<Checkpoint> {
    net_cfg.validate()?;
    train_cfg.validate()?;
    let side = net_cfg.input_side;
    if dict.k() != net_cfg.k {
        return Err(Error::invalid(format!(
            "dictionary has {} atoms but the config expects {}",
            dict.k(),
            net_cfg.k
        )));
    }
    if dict.atom_len() != side * side {
        return Err(Error::invalid("dictionary atom length does not match the input side"));
    }
    if data.clean.is_none() {
        return Err(Error::invalid("training requires clean reference rows"));
    }
    if codes.n() != data.n || codes.k() != dict.k() {
        return Err(Error::invalid("code matrix does not match the dataset/dictionary"));
    }
    if data.n == 0 {
        return Err(Error::invalid("training dataset is empty"));
    }

    let mut params = init_params(net_cfg, train_cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let atoms = Arc::new(dict.atoms().to_vec());
    let mut train_log = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..data.n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream(train_cfg.seed, Ns::Shuffle, epoch as u64));

        let mut sum_reg = 0.0f64;
        let mut sum_den = 0.0f64;
        for (bi, rows) in order.chunks(train_cfg.batch).enumerate() {
            let x = batch_images(data, rows, side, net_cfg.norm_scale, false)?;
            let y = batch_images(data, rows, side, net_cfg.norm_scale, true)?;
            let mut a = Vec::with_capacity(rows.len() * dict.k());
            for &r in rows {
                a.extend(codes.row(r).iter().map(|&v| v as f32));
            }
            let ctx = |e: Error| {
                Error::numeric(format!("training diverged at epoch {epoch}, batch {bi}: {e}"))
            };
            let mut tape = Tape::new();
            let xb = tape.leaf(x.into_vec(), [rows.len(), 1, side, side]).map_err(ctx)?;
            let yb = tape.leaf(y.into_vec(), [rows.len(), 1, side, side]).map_err(ctx)?;
            let ab = tape.leaf(a, [rows.len(), dict.k(), 1, 1]).map_err(ctx)?;
            let g = build_forward(&mut tape, &params, net_cfg, xb, &atoms).map_err(ctx)?;
            let (total, l_reg, l_den) = build_train_loss(&mut tape, &g, yb, ab).map_err(ctx)?;
            tape.backward(total).map_err(ctx)?;
            sum_reg += tape.scalar(l_reg).as_f64() * rows.len() as f64;
            sum_den += tape.scalar(l_den).as_f64() * rows.len() as f64;
            let grads = tape.param_grads();
            adam.step(&mut params, &grads, train_cfg.lr);
        }
        let l_regress = sum_reg / data.n as f64;
        let l_denoising = sum_den / data.n as f64;
        train_log.push(EpochLog {
            epoch,
            l_regress,
            l_denoising,
            total: LOSS_ALPHA * l_regress + LOSS_BETA * l_denoising,
        });
    }

    Ok(Checkpoint {
        cfg: net_cfg.clone(),
        params,
        dict_hash: dict.source_hash,
        train_log,
        seed: train_cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Tiny dictionary whose atoms are normalized synthetic decay curves.
    fn test_dict(k: usize, side: usize, seed: u64) -> Dictionary {
        let len = side * side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut atoms = Vec::with_capacity(k * len);
        for _ in 0..k {
            let rate: f64 = rng.random_range(20.0..200.0);
            let raw: Vec<f64> = (0..len).map(|i| (-(i as f64) / rate).exp()).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            atoms.extend(raw.iter().map(|&v| (v / norm) as f32));
        }
        Dictionary::new(atoms, k, len, 1.0, [7u8; 32]).unwrap()
    }

    fn small_cfg(k: usize) -> NetConfig {
        NetConfig { width_mult: 0.125, k, input_side: 30, norm_scale: 1e-3 }
    }

    fn random_input(b: usize, side: usize, seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_vec(
            [b, 1, side, side],
            (0..b * side * side).map(|_| rng.random_range(0.0f32..500.0)).collect(),
        )
        .unwrap()
    }

    fn fresh_checkpoint(cfg: &NetConfig, dict: &Dictionary, seed: u64) -> Checkpoint {
        Checkpoint {
            cfg: cfg.clone(),
            params: init_params(cfg, seed).unwrap(),
            dict_hash: dict.source_hash,
            train_log: Vec::new(),
            seed,
        }
    }

    #[test]
    fn channel_scaling_rounds_and_floors() {
        let full = NetConfig::default();
        assert_eq!(full.channels(32), 32);
        assert_eq!(full.channels(128), 128);
        let desk = NetConfig::desk();
        assert_eq!(desk.channels(32), 8);
        assert_eq!(desk.channels(64), 16);
        assert_eq!(desk.channels(128), 32);
        assert_eq!(desk.channels(16), 4);
        let tiny = NetConfig { width_mult: 0.05, ..NetConfig::default() };
        assert_eq!(tiny.channels(32), 4, "floor at 4 channels");
    }

    #[test]
    fn forward_shapes_match_contract() {
        let dict = test_dict(5, 30, 1);
        let cfg = NetConfig { k: 5, ..small_cfg(5) };
        let ckpt = fresh_checkpoint(&cfg, &dict, 3);
        let x = random_input(2, 30, 4);
        let out = forward(&ckpt, &dict, &x).unwrap();
        assert_eq!(out.denoised.shape(), [2, 1, 30, 30]);
        assert_eq!(out.code.shape(), [2, 5, 1, 1]);
        assert_eq!(out.dict_recon.shape(), [2, 900, 1, 1]);
    }

    #[test]
    fn constant_head_forces_constant_code() {
        let dict = test_dict(4, 30, 2);
        let cfg = NetConfig { k: 4, ..small_cfg(4) };
        let mut ckpt = fresh_checkpoint(&cfg, &dict, 5);
        let slot = ckpt.params.index_of("reg.fc.w").unwrap();
        ckpt.params.get_mut(slot).data.fill(0.0);
        let bias = [0.25f32, -0.5, 0.0, 1.5];
        let bslot = ckpt.params.index_of("reg.fc.b").unwrap();
        ckpt.params.get_mut(bslot).data.copy_from_slice(&bias);
        let out = forward(&ckpt, &dict, &random_input(3, 30, 6)).unwrap();
        for b in 0..3 {
            for (j, &want) in bias.iter().enumerate() {
                assert_eq!(out.code.at(b, j, 0, 0), want);
            }
        }
        // Every sample's reconstruction equals the bias code's product with
        // the atoms (up to the output unit scale).
        let mut want = vec![0.0f32; 900];
        ops::matmul_const_fwd(&bias, 1, 4, dict.atoms(), 900, &mut want);
        for b in 0..3 {
            for i in 0..900 {
                let got = out.dict_recon.at(b, i, 0, 0);
                assert!((got - want[i] * 1000.0).abs() <= 1e-3 * want[i].abs().max(1e-6));
            }
        }
    }

    #[test]
    fn dict_recon_matches_independent_product() {
        let dict = test_dict(6, 30, 3);
        let cfg = NetConfig { k: 6, ..small_cfg(6) };
        let ckpt = fresh_checkpoint(&cfg, &dict, 7);
        let x = random_input(2, 30, 8);
        let out = forward(&ckpt, &dict, &x).unwrap();
        for b in 0..2 {
            let code: Vec<f32> = (0..6).map(|j| out.code.at(b, j, 0, 0)).collect();
            let mut prod = vec![0.0f32; 900];
            ops::matmul_const_fwd(&code, 1, 6, dict.atoms(), 900, &mut prod);
            for i in 0..900 {
                let got = out.dict_recon.at(b, i, 0, 0) * 1e-3;
                assert!(
                    (got - prod[i]).abs() <= 1e-6 * prod[i].abs().max(1.0),
                    "recon {got} vs product {}",
                    prod[i]
                );
            }
        }
    }

    #[test]
    fn recon_operator_is_linear() {
        let dict = test_dict(8, 30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a1: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let a2: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let sum: Vec<f32> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let mut r1 = vec![0.0f32; 900];
        let mut r2 = vec![0.0f32; 900];
        let mut rs = vec![0.0f32; 900];
        ops::matmul_const_fwd(&a1, 1, 8, dict.atoms(), 900, &mut r1);
        ops::matmul_const_fwd(&a2, 1, 8, dict.atoms(), 900, &mut r2);
        ops::matmul_const_fwd(&sum, 1, 8, dict.atoms(), 900, &mut rs);
        for i in 0..900 {
            assert!((r1[i] + r2[i] - rs[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn loss_total_closed_forms() {
        let y = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let a = Tensor4::from_vec([1, 2, 1, 1], vec![0.5f32, -0.5]).unwrap();
        let perfect = ForwardOut {
            denoised: y.clone(),
            code: a.clone(),
            dict_recon: Tensor4::zeros([1, 4, 1, 1]),
        };
        assert_eq!(loss_total(&perfect, &y, &a).unwrap(), (0.0, 0.0, 0.0));
        // Offsets of +-0.25 are exactly representable, so the means are
        // exact: l_den = 0.0625, l_reg = 0.25, total = 10 * 0.25 + 0.0625.
        let off = ForwardOut {
            denoised: Tensor4::from_vec([1, 1, 2, 2], vec![1.25f32, 2.25, 3.25, 4.25]).unwrap(),
            code: Tensor4::from_vec([1, 2, 1, 1], vec![0.75f32, -0.75]).unwrap(),
            dict_recon: Tensor4::zeros([1, 4, 1, 1]),
        };
        let (total, l_reg, l_den) = loss_total(&off, &y, &a).unwrap();
        assert_eq!(l_den, 0.0625);
        assert_eq!(l_reg, 0.25);
        assert_eq!(total, 2.5625);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let cfg = small_cfg(4);
        let p1 = init_params(&cfg, 42).unwrap();
        let p2 = init_params(&cfg, 42).unwrap();
        let p3 = init_params(&cfg, 43).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.data, b.data);
        }
        assert!(p1.iter().zip(p3.iter()).any(|(a, b)| a.data != b.data));
        for p in p1.iter() {
            if p.name.ends_with(".b") {
                assert!(p.data.iter().all(|&v| v == 0.0), "{} must start at zero", p.name);
            }
        }
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let dict = test_dict(4, 30, 5);
        let cfg = NetConfig { k: 4, ..small_cfg(4) };
        let mut ckpt = fresh_checkpoint(&cfg, &dict, 1);
        ckpt.dict_hash = [9u8; 32];
        assert!(forward(&ckpt, &dict, &random_input(1, 30, 1)).is_err());
    }

    fn tiny_training_setup() -> (Dataset, Dictionary, crate::dict::Codes, NetConfig) {
        use crate::sim::{make_dataset, DomainKind, DomainSpec};
        let data = make_dataset(&DomainSpec::default_for(DomainKind::Source), 8, 77).unwrap();
        let norm = 1e-3f32;
        let clean_norm: Vec<f32> =
            data.clean.as_ref().unwrap().iter().map(|&v| v * norm).collect();
        let cfg = crate::dict::DictLearnConfig {
            k: 3,
            epochs: 2,
            max_iters: 60,
            tol: 1e-8,
            enforce_capacity: false,
            ..crate::dict::DictLearnConfig::default()
        };
        let (dict, codes, _) = crate::dict::learn_dictionary(&clean_norm, 8, 900, &cfg).unwrap();
        let net_cfg = NetConfig { k: 3, ..small_cfg(3) };
        (data, dict, codes, net_cfg)
    }

    #[test]
    fn zero_lr_training_is_a_bitwise_noop() {
        let (data, dict, codes, net_cfg) = tiny_training_setup();
        let tc = TrainConfig { epochs: 1, batch: 4, lr: 0.0, seed: 11 };
        let ckpt = train(&data, &dict, &codes, &net_cfg, &tc).unwrap();
        let init = init_params(&net_cfg, 11).unwrap();
        for (a, b) in ckpt.params.iter().zip(init.iter()) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{} moved under lr=0", a.name);
        }
        assert_eq!(ckpt.train_log.len(), 1);
        assert!(ckpt.train_log[0].total.is_finite());
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let (data, dict, codes, net_cfg) = tiny_training_setup();
        let tc = TrainConfig { epochs: 2, batch: 4, lr: 1e-3, seed: 19 };
        let c1 = train(&data, &dict, &codes, &net_cfg, &tc).unwrap();
        let c2 = train(&data, &dict, &codes, &net_cfg, &tc).unwrap();
        for (a, b) in c1.params.iter().zip(c2.params.iter()) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(c1.train_log, c2.train_log);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let (data, dict, codes, net_cfg) = tiny_training_setup();
        let tc = TrainConfig { epochs: 1, batch: 4, lr: 1e-3, seed: 23 };
        let ckpt = train(&data, &dict, &codes, &net_cfg, &tc).unwrap();
        let dir = std::env::temp_dir().join(format!("dptta-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.bin");
        let p2 = dir.join("b.bin");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Same outputs before and after the round trip.
        let x = random_input(2, 30, 31);
        let a = forward(&ckpt, &dict, &x).unwrap();
        let b = forward(&loaded, &dict, &x).unwrap();
        assert_eq!(a.denoised.data(), b.denoised.data());
        assert_eq!(a.code.data(), b.code.data());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
