//! Multi-layer perceptron with full-precision and fake-quantized forward modes
//! and manual backpropagation through the straight-through estimator.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{softmax, GradientBuffer, ProbVector, Tensor2};
use crate::quant::{calibrate_scale, in_clip_range, quantize_with, QuantConfig, PASSTHROUGH_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Ignores every quantizer.
    Fp,
    /// Uses `q(w)` for quantized layers and `q(a)` for quantized activations.
    Quant,
}

/// How quantization is attached to a model's layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits_w: u32,
    pub bits_a: u32,
    pub signed: bool,
    /// Leave the first and last layers in full precision.
    pub keep_edges_fp: bool,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            bits_w: 2,
            bits_a: PASSTHROUGH_BITS,
            signed: true,
            keep_edges_fp: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`, row-major.
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub relu: bool,
    /// Weight quantizer; `None` keeps the layer full precision.
    pub weight_quant: Option<QuantConfig>,
    /// Quantizer applied to this layer's input activations.
    pub act_quant: Option<QuantConfig>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    fn effective_weight(&self, mode: Mode) -> Result<Tensor2> {
        match (mode, &self.weight_quant) {
            (Mode::Quant, Some(cfg)) => {
                let s = cfg.scale().ok_or_else(|| {
                    Error::State("quant-mode forward with an uncalibrated weight quantizer".into())
                })?;
                Ok(self.weight.map(|w| quantize_with(w, s, cfg)))
            }
            _ => Ok(self.weight.clone()),
        }
    }

    fn active_act_quant(&self, mode: Mode) -> Result<Option<(QuantConfig, f64)>> {
        match (mode, &self.act_quant) {
            (Mode::Quant, Some(cfg)) => {
                let s = cfg.scale().ok_or_else(|| {
                    Error::State(
                        "quant-mode forward with an uncalibrated activation quantizer".into(),
                    )
                })?;
                Ok(Some((*cfg, s)))
            }
            _ => Ok(None),
        }
    }
}

/// Layered classifier. The real-valued weights are the only stored parameters;
/// quantized weights are recomputed on every quant-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Vec<usize>,
    seed: u64,
    layers: Vec<Layer>,
    generation: u64,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mode: Mode,
    generation: u64,
    arch: Vec<usize>,
    /// Per layer: input before activation quantization.
    raw_inputs: Vec<Tensor2>,
    /// Per layer: input actually multiplied with the weights.
    inputs: Vec<Tensor2>,
    pre_acts: Vec<Tensor2>,
    weights: Vec<Tensor2>,
    probs: Vec<ProbVector>,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn probs(&self) -> &[ProbVector] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<ProbVector> {
        self.probs
    }

    /// Logits of the final layer, one row per sample.
    pub fn logits(&self) -> &Tensor2 {
        self.pre_acts.last().expect("trace has at least one layer")
    }
}

pub fn init_model(arch: &[usize], seed: u64) -> Result<Model> {
    if arch.len() < 2 {
        return Err(Error::Config(format!(
            "architecture needs at least input and output widths, got {arch:?}"
        )));
    }
    if arch.contains(&0) {
        return Err(Error::Config(format!(
            "architecture widths must be positive: {arch:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = arch.len() - 1;
    let layers = arch
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Layer {
                weight: Tensor2::new(fan_out, fan_in, values).expect("finite init"),
                bias: vec![0.0; fan_out],
                relu: l + 1 < n_layers,
                weight_quant: None,
                act_quant: None,
            }
        })
        .collect();
    Ok(Model {
        arch: arch.to_vec(),
        seed,
        layers,
        generation: 0,
    })
}

impl Model {
    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers. Bumps the generation so that traces taken
    /// before the edit are rejected by [`backward`].
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn input_width(&self) -> usize {
        self.arch[0]
    }

    pub fn classes(&self) -> usize {
        *self.arch.last().expect("arch has >= 2 widths")
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum()
    }

    /// Flat parameter sizes in `[w0, b0, w1, b1, ...]` order.
    pub fn param_shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.values().len(), l.bias.len()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.values_mut(), &mut l.bias[..]])
            .collect()
    }

    pub fn apply_sgd(&mut self, grads: &GradientBuffer, lr: f64) -> Result<()> {
        crate::numerics::sgd_update(&mut self.params_mut(), grads, lr)
    }

    pub fn has_quantized_layers(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.weight_quant.is_some_and(|c| !c.is_passthrough()))
    }

    /// Attaches (uncalibrated) quantizers according to `spec`.
    pub fn attach_quantizers(&mut self, spec: &QuantSpec) -> Result<()> {
        let n = self.layers.len();
        let wcfg = QuantConfig::new(spec.bits_w, spec.signed)?;
        let acfg = QuantConfig::new(spec.bits_a, false)?;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let edge = l == 0 || l + 1 == n;
            let quantized = !wcfg.is_passthrough() && !(spec.keep_edges_fp && edge);
            layer.weight_quant = quantized.then_some(wcfg);
            layer.act_quant = (quantized && l > 0 && !acfg.is_passthrough()).then_some(acfg);
        }
        self.generation += 1;
        Ok(())
    }

    /// Sets each weight quantizer's scale from the current real weights.
    pub fn calibrate_weight_scales(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Some(cfg) = layer.weight_quant {
                layer.weight_quant = Some(calibrate_scale(layer.weight.values(), cfg)?);
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Sets each activation quantizer's scale from full-precision activations
    /// observed on `x`.
    pub fn calibrate_activation_scales(&mut self, x: &Tensor2) -> Result<()> {
        if self.layers.iter().all(|l| l.act_quant.is_none()) {
            return Ok(());
        }
        let trace = forward(self, x, Mode::Fp)?;
        for (layer, input) in self.layers.iter_mut().zip(&trace.raw_inputs) {
            if let Some(cfg) = layer.act_quant {
                layer.act_quant = Some(calibrate_scale(input.values(), cfg)?);
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Per-layer scales (`None` for full-precision layers).
    pub fn weight_scales(&self) -> Vec<Option<f64>> {
        self.layers
            .iter()
            .map(|l| l.weight_quant.and_then(|c| c.scale()))
            .collect()
    }

    pub fn activation_scales(&self) -> Vec<Option<f64>> {
        self.layers
            .iter()
            .map(|l| l.act_quant.and_then(|c| c.scale()))
            .collect()
    }
}

fn linear(input: &Tensor2, weight: &Tensor2, bias: &[f64]) -> Tensor2 {
    let (b, out, inw) = (input.rows(), weight.rows(), weight.cols());
    let mut z = Tensor2::zeros(b, out);
    for r in 0..b {
        let x = input.row(r);
        let zr = z.row_mut(r);
        for o in 0..out {
            let w = weight.row(o);
            let mut acc = bias[o];
            for i in 0..inw {
                acc += w[i] * x[i];
            }
            zr[o] = acc;
        }
    }
    z
}

/// Batch forward pass. Rows of `x` are samples.
pub fn forward(model: &Model, x: &Tensor2, mode: Mode) -> Result<ForwardTrace> {
    if x.cols() != model.input_width() {
        return Err(Error::Dimension(format!(
            "input has {} features, model expects {}",
            x.cols(),
            model.input_width()
        )));
    }
    let n = model.layers.len();
    let mut trace = ForwardTrace {
        mode,
        generation: model.generation,
        arch: model.arch.clone(),
        raw_inputs: Vec::with_capacity(n),
        inputs: Vec::with_capacity(n),
        pre_acts: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        probs: Vec::new(),
    };
    let mut current = x.clone();
    for layer in &model.layers {
        let weight = layer.effective_weight(mode)?;
        let input = match layer.active_act_quant(mode)? {
            Some((cfg, s)) => current.map(|a| quantize_with(a, s, &cfg)),
            None => current.clone(),
        };
        let z = linear(&input, &weight, &layer.bias);
        let next = if layer.relu {
            z.map(|v| v.max(0.0))
        } else {
            z.clone()
        };
        trace.raw_inputs.push(std::mem::replace(&mut current, next));
        trace.inputs.push(input);
        trace.pre_acts.push(z);
        trace.weights.push(weight);
    }
    trace.probs = (0..current.rows())
        .map(|r| softmax(current.row(r)))
        .collect::<Result<_>>()?;
    Ok(trace)
}

/// Forward pass keeping only the output distributions.
pub fn predict(model: &Model, x: &Tensor2, mode: Mode) -> Result<Vec<ProbVector>> {
    Ok(forward(model, x, mode)?.into_probs())
}

/// Which weights the returned gradients are taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWrt {
    /// Real-valued weights: the STE indicator is applied to quantized layers.
    Real,
    /// The weights used in the forward pass (`w^q` for quantized layers).
    Effective,
}

/// Gradient of the summed cross-entropy `Σ_b CE(p_b, target_b)` with respect
/// to the real-valued parameters, STE applied at every quantized tensor.
pub fn backward(
    model: &Model,
    trace: &ForwardTrace,
    targets: &[ProbVector],
) -> Result<GradientBuffer> {
    backward_wrt(model, trace, targets, GradWrt::Real)
}

pub fn backward_wrt(
    model: &Model,
    trace: &ForwardTrace,
    targets: &[ProbVector],
    wrt: GradWrt,
) -> Result<GradientBuffer> {
    if trace.generation != model.generation || trace.arch != model.arch {
        return Err(Error::State(
            "forward trace does not belong to the current model parameters".into(),
        ));
    }
    let batch = trace.probs.len();
    if targets.len() != batch {
        return Err(Error::Dimension(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let classes = model.classes();
    let mut dz = Tensor2::zeros(batch, classes);
    for (b, (p, t)) in trace.probs.iter().zip(targets).enumerate() {
        if t.len() != classes {
            return Err(Error::Dimension(format!(
                "target {b} has {} classes, model has {classes}",
                t.len()
            )));
        }
        for ((d, pm), tm) in dz.row_mut(b).iter_mut().zip(p.as_slice()).zip(t.as_slice()) {
            *d = pm - tm;
        }
    }

    let n = model.layers.len();
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); 2 * n];
    for l in (0..n).rev() {
        let layer = &model.layers[l];
        let input = &trace.inputs[l];
        let weight = &trace.weights[l];
        let (out, inw) = (weight.rows(), weight.cols());

        let mut gw = vec![0.0; out * inw];
        let mut gb = vec![0.0; out];
        for b in 0..batch {
            let d = dz.row(b);
            let a = input.row(b);
            for o in 0..out {
                let dv = d[o];
                gb[o] += dv;
                if dv != 0.0 {
                    let row = &mut gw[o * inw..(o + 1) * inw];
                    for i in 0..inw {
                        row[i] += dv * a[i];
                    }
                }
            }
        }
        if wrt == GradWrt::Real && trace.mode == Mode::Quant {
            if let Some(cfg) = &layer.weight_quant {
                let s = cfg
                    .scale()
                    .ok_or_else(|| Error::State("uncalibrated weight quantizer".into()))?;
                for (g, &w) in gw.iter_mut().zip(layer.weight.values()) {
                    if !in_clip_range(w, s, cfg) {
                        *g = 0.0;
                    }
                }
            }
        }

        if l > 0 {
            let mut da = Tensor2::zeros(batch, inw);
            for b in 0..batch {
                let d = dz.row(b);
                let dar = da.row_mut(b);
                for (o, &dv) in d.iter().enumerate().take(out) {
                    if dv != 0.0 {
                        for (a, w) in dar.iter_mut().zip(weight.row(o)) {
                            *a += dv * w;
                        }
                    }
                }
            }
            if trace.mode == Mode::Quant {
                if let Some(cfg) = &layer.act_quant {
                    let s = cfg
                        .scale()
                        .ok_or_else(|| Error::State("uncalibrated activation quantizer".into()))?;
                    for (g, &a) in da.values_mut().iter_mut().zip(trace.raw_inputs[l].values()) {
                        if !in_clip_range(a, s, cfg) {
                            *g = 0.0;
                        }
                    }
                }
            }
            if model.layers[l - 1].relu {
                for (g, &z) in da
                    .values_mut()
                    .iter_mut()
                    .zip(trace.pre_acts[l - 1].values())
                {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            dz = da;
        }
        grads[2 * l] = gw;
        grads[2 * l + 1] = gb;
    }
    Ok(GradientBuffer::new(grads))
}

/// Fraction of samples whose argmax prediction (lowest index on ties) equals
/// the label.
pub fn evaluate(model: &Model, data: &Dataset, mode: Mode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let correct = correctness(model, data, mode)?
        .iter()
        .filter(|&&c| c)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Per-sample correctness of the argmax prediction, in id order.
pub fn correctness(model: &Model, data: &Dataset, mode: Mode) -> Result<Vec<bool>> {
    let probs = predict_dataset(model, data, mode)?;
    Ok(probs
        .iter()
        .zip(data.labels())
        .map(|(p, &y)| p.argmax() == y)
        .collect())
}

const PREDICT_CHUNK: usize = 512;

/// Output distributions for every sample of `data`, in id order.
pub fn predict_dataset(model: &Model, data: &Dataset, mode: Mode) -> Result<Vec<ProbVector>> {
    let mut out = Vec::with_capacity(data.len());
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(PREDICT_CHUNK) {
        out.extend(predict(model, &data.batch(chunk)?, mode)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: an ASCII header line `#acs-model v1 role=<role>\n`, then
// little-endian binary: seed u64, generation u64, width count u32, widths u32*,
// and per layer: relu u8, weight quantizer, activation quantizer, weights
// f64*, biases f64*. A quantizer is a presence byte followed by bits u32,
// signed u8, scale presence u8, scale f64.
// ---------------------------------------------------------------------------

const CHECKPOINT_TAG: &str = "#acs-model v1";

pub fn checkpoint_bytes(model: &Model, role: &str) -> Vec<u8> {
    let mut buf = format!("{CHECKPOINT_TAG} role={role}\n").into_bytes();
    buf.extend(model.seed.to_le_bytes());
    buf.extend(model.generation.to_le_bytes());
    buf.extend((model.arch.len() as u32).to_le_bytes());
    for &w in &model.arch {
        buf.extend((w as u32).to_le_bytes());
    }
    let put_quant = |buf: &mut Vec<u8>, q: &Option<QuantConfig>| match q {
        None => buf.push(0),
        Some(c) => {
            buf.push(1);
            buf.extend(c.bits().to_le_bytes());
            buf.push(c.signed() as u8);
            buf.push(c.scale().is_some() as u8);
            buf.extend(c.scale().unwrap_or(0.0).to_le_bytes());
        }
    };
    for layer in &model.layers {
        buf.push(layer.relu as u8);
        put_quant(&mut buf, &layer.weight_quant);
        put_quant(&mut buf, &layer.act_quant);
        for v in layer.weight.values().iter().chain(&layer.bias) {
            buf.extend(v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes, returning the model and its `role` header field.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(Model, String)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(0, "missing checkpoint header line"))?;
    let header =
        std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(0, "header is not UTF-8"))?;
    let rest = header
        .strip_prefix(CHECKPOINT_TAG)
        .ok_or_else(|| Error::format(0, format!("bad checkpoint magic {header:?}")))?;
    let role = rest
        .trim()
        .strip_prefix("role=")
        .ok_or_else(|| Error::format(0, "checkpoint header lacks role="))?
        .to_string();

    let mut cur = Cursor { bytes, pos: nl + 1 };
    let seed = cur.u64()?;
    let generation = cur.u64()?;
    let n_widths = cur.u32()? as usize;
    if n_widths < 2 {
        return Err(Error::format(
            cur.pos as u64,
            "checkpoint architecture has < 2 widths",
        ));
    }
    let arch = (0..n_widths)
        .map(|_| cur.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let get_quant = |cur: &mut Cursor| -> Result<Option<QuantConfig>> {
        let at = cur.pos as u64;
        if cur.u8()? == 0 {
            return Ok(None);
        }
        let bits = cur.u32()?;
        let signed = cur.u8()? != 0;
        let has_scale = cur.u8()? != 0;
        let scale = cur.f64()?;
        let cfg = QuantConfig::new(bits, signed).map_err(|e| Error::format(at, e.to_string()))?;
        Ok(Some(if has_scale {
            cfg.with_scale(scale)
                .map_err(|e| Error::format(at, e.to_string()))?
        } else {
            cfg
        }))
    };
    let mut layers = Vec::with_capacity(n_widths - 1);
    for w in arch.windows(2) {
        let relu = cur.u8()? != 0;
        let weight_quant = get_quant(&mut cur)?;
        let act_quant = get_quant(&mut cur)?;
        let at = cur.pos as u64;
        let weights = (0..w[0] * w[1])
            .map(|_| cur.f64())
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..w[1]).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let weight =
            Tensor2::new(w[1], w[0], weights).map_err(|e| Error::format(at, e.to_string()))?;
        layers.push(Layer {
            weight,
            bias,
            relu,
            weight_quant,
            act_quant,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            "trailing bytes after checkpoint",
        ));
    }
    Ok((
        Model {
            arch,
            seed,
            layers,
            generation,
        },
        role,
    ))
}

pub fn save_checkpoint(model: &Model, role: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(model, role))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, String)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
