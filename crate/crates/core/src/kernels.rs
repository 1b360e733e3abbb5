//! Parametric shape kernels: the smoothed cylinder, arrow and negative
//! sphere, their discretization on a voxel stencil, zero-sum/L1 normalization
//! and analytic derivatives of the normalized weights with respect to every
//! trainable shape parameter.
//!
//! Kernel-local coordinates are in voxels. A voxel `[i, j, k]` of a stencil
//! of shape `(k_z, k_y, k_x)` sits at `(x, y, z) = (k, j, i)`; the horizontal
//! center is `((k_x - 1) / 2, (k_y - 1) / 2)` and `z` runs from the bottom
//! slice upwards.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_shape, Grid3, Shape3};

/// Largest `|tan(βπ)|` accepted before the arrow cone radius is treated as
/// overflowing.
pub const MAX_CONE_TAN: f64 = 1e6;

/// L1 norms at or below this are a degenerate (constant) kernel.
const DEGENERATE_L1: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    Cylinder,
    Arrow,
    NegSphere,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::Cylinder, KernelKind::Arrow, KernelKind::NegSphere];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Cylinder => "cylinder",
            KernelKind::Arrow => "arrow",
            KernelKind::NegSphere => "negsphere",
        }
    }

    /// Names of the trainable shape parameters, in gradient order.
    pub fn trainable_names(self) -> &'static [&'static str] {
        match self {
            KernelKind::Cylinder => &["r", "sigma"],
            KernelKind::Arrow => &["r", "sigma", "r_c", "beta"],
            KernelKind::NegSphere => &["r", "sigma", "omega"],
        }
    }

    /// Only the negative sphere keeps its raw mass; the others are zero-sum.
    pub fn zero_sum(self) -> bool {
        !matches!(self, KernelKind::NegSphere)
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cylinder" => Ok(KernelKind::Cylinder),
            "arrow" => Ok(KernelKind::Arrow),
            "negsphere" => Ok(KernelKind::NegSphere),
            other => Err(Error::config(format!("unknown kernel kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderParams {
    pub r: f64,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrowParams {
    pub r: f64,
    pub sigma: f64,
    /// Height (in voxel slices from the stencil bottom) where the cone
    /// branch starts. Fixed, not trained.
    pub h: f64,
    pub r_c: f64,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegSphereParams {
    pub r: f64,
    pub sigma: f64,
    pub omega: f64,
}

impl ArrowParams {
    /// Radius of the upper branch, `r_c · tan(βπ)`.
    pub fn cone_radius(&self) -> f64 {
        self.r_c * (self.beta * PI).tan()
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::out_of_range(name, v, "must be finite and > 0"));
    }
    Ok(())
}

impl CylinderParams {
    pub fn validate(&self) -> Result<()> {
        positive("cylinder.r", self.r)?;
        positive("cylinder.sigma", self.sigma)
    }
}

impl ArrowParams {
    pub fn validate(&self) -> Result<()> {
        positive("arrow.r", self.r)?;
        positive("arrow.sigma", self.sigma)?;
        positive("arrow.r_c", self.r_c)?;
        positive("arrow.h", self.h)?;
        if !(0.0..0.5).contains(&self.beta) {
            return Err(Error::out_of_range("arrow.beta", self.beta, "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

impl NegSphereParams {
    pub fn validate(&self) -> Result<()> {
        positive("negsphere.r", self.r)?;
        positive("negsphere.sigma", self.sigma)?;
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::out_of_range("negsphere.omega", self.omega, "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Shape parameters of one operator of any kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GeneoParams {
    Cylinder(CylinderParams),
    Arrow(ArrowParams),
    NegSphere(NegSphereParams),
}

impl GeneoParams {
    pub fn kind(&self) -> KernelKind {
        match self {
            GeneoParams::Cylinder(_) => KernelKind::Cylinder,
            GeneoParams::Arrow(_) => KernelKind::Arrow,
            GeneoParams::NegSphere(_) => KernelKind::NegSphere,
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.kind().trainable_names().len()
    }

    pub fn trainable(&self) -> Vec<f64> {
        match *self {
            GeneoParams::Cylinder(p) => vec![p.r, p.sigma],
            GeneoParams::Arrow(p) => vec![p.r, p.sigma, p.r_c, p.beta],
            GeneoParams::NegSphere(p) => vec![p.r, p.sigma, p.omega],
        }
    }

    /// Overwrite the trainable values from `v` (same order as
    /// [`GeneoParams::trainable`]).
    pub fn set_trainable(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_trainable());
        match self {
            GeneoParams::Cylinder(p) => {
                p.r = v[0];
                p.sigma = v[1];
            }
            GeneoParams::Arrow(p) => {
                p.r = v[0];
                p.sigma = v[1];
                p.r_c = v[2];
                p.beta = v[3];
            }
            GeneoParams::NegSphere(p) => {
                p.r = v[0];
                p.sigma = v[1];
                p.omega = v[2];
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GeneoParams::Cylinder(p) => p.validate(),
            GeneoParams::Arrow(p) => p.validate(),
            GeneoParams::NegSphere(p) => p.validate(),
        }
    }

    /// Looser check than [`validate`](Self::validate): training relaxes the
    /// sign constraints, so only values that break the formulas are refused.
    fn check_evaluable(&self) -> Result<()> {
        let kind = self.kind();
        for (name, v) in kind.trainable_names().iter().zip(self.trainable()) {
            if !v.is_finite() {
                return Err(Error::out_of_range(format!("{kind}.{name}"), v, "not finite"));
            }
        }
        let sigma = self.trainable()[1];
        if sigma == 0.0 {
            return Err(Error::out_of_range(format!("{kind}.sigma"), sigma, "must be nonzero"));
        }
        if let GeneoParams::Arrow(p) = self {
            let t = (p.beta * PI).tan();
            if p.beta.abs() >= 0.5 || !t.is_finite() || t.abs() > MAX_CONE_TAN {
                return Err(Error::out_of_range(
                    "arrow.beta",
                    p.beta,
                    "tan(beta*pi) overflows",
                ));
            }
        }
        Ok(())
    }
}

#[inline]
fn gaussian_of_sq(u: f64, sigma: f64) -> f64 {
    (-(u * u) / (2.0 * sigma * sigma)).exp()
}

/// Smoothed cylinder `exp(-(‖π(x) − π(c)‖² − r²)² / 2σ²)`, where `π` drops
/// the vertical coordinate. Points are `(x, y, z)`.
pub fn eval_cylinder(x: [f64; 3], params: &CylinderParams, c: [f64; 3]) -> f64 {
    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    gaussian_of_sq(d2 - params.r * params.r, params.sigma)
}

/// Two-branch arrow: the cylinder below height `h`, and a ring of radius
/// `r_c·tan(βπ)` at or above it.
pub fn eval_arrow(x: [f64; 3], params: &ArrowParams, c: [f64; 3]) -> f64 {
    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    let radius = if x[2] < params.h {
        params.r
    } else {
        params.cone_radius()
    };
    gaussian_of_sq(d2 - radius * radius, params.sigma)
}

/// Negative sphere `exp(-(‖x − c‖² − r²)² / 2σ²) − ω`.
pub fn eval_negsphere(x: [f64; 3], params: &NegSphereParams, c: [f64; 3]) -> f64 {
    let d2 = (0..3).map(|a| (x[a] - c[a]).powi(2)).sum::<f64>();
    gaussian_of_sq(d2 - params.r * params.r, params.sigma) - params.omega
}

pub fn eval(params: &GeneoParams, x: [f64; 3], c: [f64; 3]) -> f64 {
    match params {
        GeneoParams::Cylinder(p) => eval_cylinder(x, p, c),
        GeneoParams::Arrow(p) => eval_arrow(x, p, c),
        GeneoParams::NegSphere(p) => eval_negsphere(x, p, c),
    }
}

/// Kernel value and its derivatives with respect to the trainable parameters.
fn eval_with_grad(params: &GeneoParams, x: [f64; 3], c: [f64; 3], grad: &mut [f64]) -> f64 {
    let horiz = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    match *params {
        GeneoParams::Cylinder(p) => {
            let u = horiz - p.r * p.r;
            let s2 = p.sigma * p.sigma;
            let g = gaussian_of_sq(u, p.sigma);
            grad[0] = g * 2.0 * p.r * u / s2;
            grad[1] = g * u * u / (s2 * p.sigma);
            g
        }
        GeneoParams::Arrow(p) => {
            let s2 = p.sigma * p.sigma;
            if x[2] < p.h {
                let u = horiz - p.r * p.r;
                let g = gaussian_of_sq(u, p.sigma);
                grad[0] = g * 2.0 * p.r * u / s2;
                grad[1] = g * u * u / (s2 * p.sigma);
                grad[2] = 0.0;
                grad[3] = 0.0;
                g
            } else {
                let t = (p.beta * PI).tan();
                let u = horiz - (p.r_c * t).powi(2);
                let g = gaussian_of_sq(u, p.sigma);
                // d g / d(R²) with R = r_c·tan(βπ)
                let dg_dr2 = g * u / s2;
                grad[0] = 0.0;
                grad[1] = g * u * u / (s2 * p.sigma);
                grad[2] = dg_dr2 * 2.0 * p.r_c * t * t;
                grad[3] = dg_dr2 * p.r_c * p.r_c * 2.0 * t * (1.0 + t * t) * PI;
                g
            }
        }
        GeneoParams::NegSphere(p) => {
            let d2 = horiz + (x[2] - c[2]).powi(2);
            let u = d2 - p.r * p.r;
            let s2 = p.sigma * p.sigma;
            let e = gaussian_of_sq(u, p.sigma);
            grad[0] = e * 2.0 * p.r * u / s2;
            grad[1] = e * u * u / (s2 * p.sigma);
            grad[2] = -1.0;
            e - p.omega
        }
    }
}

/// Discretized kernel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor {
    pub kind: KernelKind,
    pub weights: Grid3<f64>,
}

impl KernelTensor {
    pub fn shape(&self) -> Shape3 {
        self.weights.shape()
    }

    pub fn sum(&self) -> f64 {
        self.weights.sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.l1_norm()
    }

    /// Plain-text dump: header `k_z k_y k_x kind`, then one line per
    /// `(z, y)` row with 9 significant digits per weight.
    pub fn write_kvol<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let [kz, ky, kx] = self.shape();
        writeln!(w, "{kz} {ky} {kx} {}", self.kind)?;
        for row in self.weights.as_slice().chunks(kx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_kvol(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::config("kvol: truncated header"))?
                .parse()
                .map_err(|e| Error::config(format!("kvol: bad dimension: {e}")))
        };
        let shape = [dim()?, dim()?, dim()?];
        check_shape(shape)?;
        let mut tokens = text.split_whitespace().skip(3);
        let kind: KernelKind = tokens
            .next()
            .ok_or_else(|| Error::config("kvol: missing kind"))?
            .parse()?;
        let weights = tokens
            .map(|t| t.parse::<f64>().map_err(|e| Error::config(format!("kvol: bad weight `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            weights: Grid3::from_vec(shape, weights)?,
        })
    }
}

/// Kernel-local center of a stencil. The vertical coordinate is only used by
/// the negative sphere.
pub fn stencil_center(shape: Shape3) -> [f64; 3] {
    [
        (shape[2] as f64 - 1.0) / 2.0,
        (shape[1] as f64 - 1.0) / 2.0,
        (shape[0] as f64 - 1.0) / 2.0,
    ]
}

fn check_stencil(params: &GeneoParams, shape: Shape3) -> Result<()> {
    check_shape(shape)?;
    if let GeneoParams::Arrow(p) = params {
        if !(p.h > 0.0 && p.h < shape[0] as f64) {
            return Err(Error::out_of_range(
                "arrow.h",
                p.h,
                "must lie strictly between 0 and the kernel depth",
            ));
        }
    }
    params.check_evaluable()
}

/// Sample the continuous kernel at every voxel center of a stencil.
pub fn discretize(params: &GeneoParams, shape: Shape3) -> Result<KernelTensor> {
    check_stencil(params, shape)?;
    let c = stencil_center(shape);
    let weights = Grid3::from_fn(shape, |[z, y, x]| eval(params, [x as f64, y as f64, z as f64], c));
    Ok(KernelTensor {
        kind: params.kind(),
        weights,
    })
}

/// Result of mean subtraction before the L1 cap, kept for differentiation.
struct Centered {
    values: Vec<f64>,
    l1: f64,
}

fn center(kind: KernelKind, raw: &[f64]) -> Result<Centered> {
    let mean = if kind.zero_sum() {
        raw.iter().sum::<f64>() / raw.len() as f64
    } else {
        0.0
    };
    let values: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let l1 = values.iter().map(|v| v.abs()).sum::<f64>();
    if !(l1 > DEGENERATE_L1) {
        return Err(Error::DegenerateKernel { kind: kind.name() });
    }
    Ok(Centered { values, l1 })
}

/// Zero-sum (cylinder, arrow) then cap the L1 norm at 1 by dividing through
/// `max(1, ‖w‖₁)`. The negative sphere only gets the cap.
pub fn normalize(kernel: &KernelTensor) -> Result<KernelTensor> {
    let c = center(kernel.kind, kernel.weights.as_slice())?;
    let scale = c.l1.max(1.0);
    let values = c.values.into_iter().map(|v| v / scale).collect();
    Ok(KernelTensor {
        kind: kernel.kind,
        weights: Grid3::from_vec(kernel.shape(), values)?,
    })
}

/// `normalize(discretize(params, shape))`.
pub fn normalized_kernel(params: &GeneoParams, shape: Shape3) -> Result<KernelTensor> {
    normalize(&discretize(params, shape)?)
}

/// `∂(normalized weight)/∂p` for every trainable parameter `p`, in the order
/// of [`KernelKind::trainable_names`].
#[derive(Clone, Debug)]
pub struct KernelGradients {
    pub kind: KernelKind,
    pub tensors: Vec<Grid3<f64>>,
}

impl KernelGradients {
    pub fn names(&self) -> &'static [&'static str] {
        self.kind.trainable_names()
    }
}

/// Raw (pre-normalization) weights and their parameter derivatives.
pub fn raw_kernel_with_gradients(
    params: &GeneoParams,
    shape: Shape3,
) -> Result<(KernelTensor, KernelGradients)> {
    check_stencil(params, shape)?;
    let c = stencil_center(shape);
    let n = params.n_trainable();
    let len = shape[0] * shape[1] * shape[2];
    let mut weights = Vec::with_capacity(len);
    let mut grads = vec![Vec::with_capacity(len); n];
    let mut g = vec![0.0; n];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                weights.push(eval_with_grad(params, [x as f64, y as f64, z as f64], c, &mut g));
                for (t, &gv) in grads.iter_mut().zip(&g) {
                    t.push(gv);
                }
            }
        }
    }
    let kind = params.kind();
    let tensors = grads
        .into_iter()
        .map(|v| Grid3::from_vec(shape, v))
        .collect::<Result<_>>()?;
    Ok((
        KernelTensor {
            kind,
            weights: Grid3::from_vec(shape, weights)?,
        },
        KernelGradients { kind, tensors },
    ))
}

/// Normalized kernel together with its parameter Jacobian, chained through
/// mean subtraction and the L1 cap. At `‖w‖₁ = 1` exactly the capped branch
/// is used; `sign(0)` is taken as 0.
pub fn normalized_kernel_with_gradients(
    params: &GeneoParams,
    shape: Shape3,
) -> Result<(KernelTensor, KernelGradients)> {
    let (raw, raw_grads) = raw_kernel_with_gradients(params, shape)?;
    let kind = raw.kind;
    let c = center(kind, raw.weights.as_slice())?;
    let capped = c.l1 >= 1.0;
    let scale = if capped { c.l1 } else { 1.0 };
    let signs: Vec<f64> = c
        .values
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
        .collect();

    let mut tensors = Vec::with_capacity(raw_grads.tensors.len());
    for dr in &raw_grads.tensors {
        let dr = dr.as_slice();
        let mean = if kind.zero_sum() {
            dr.iter().sum::<f64>() / dr.len() as f64
        } else {
            0.0
        };
        let dm: Vec<f64> = dr.iter().map(|v| v - mean).collect();
        let out: Vec<f64> = if capped {
            let dl1: f64 = signs.iter().zip(&dm).map(|(s, d)| s * d).sum();
            dm.iter()
                .zip(&c.values)
                .map(|(d, m)| d / scale - m * dl1 / (scale * scale))
                .collect()
        } else {
            dm
        };
        tensors.push(Grid3::from_vec(shape, out)?);
    }
    let weights = Grid3::from_vec(shape, c.values.iter().map(|v| v / scale).collect())?;
    Ok((KernelTensor { kind, weights }, KernelGradients { kind, tensors }))
}

pub fn kernel_param_gradients(params: &GeneoParams, shape: Shape3) -> Result<KernelGradients> {
    normalized_kernel_with_gradients(params, shape).map(|(_, g)| g)
}
