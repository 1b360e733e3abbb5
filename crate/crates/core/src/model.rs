//! The observer: a convex combination of normalized GENEO responses, the
//! `max(0, tanh(·))` probability head and the thresholded mask.
//!
//! [`GeneoObserver`] handles any multiset of operators (the ablation runner
//! needs that); [`SceneNetParams`] is the production model with exactly one
//! cylinder, one arrow and one negative sphere, 11 trainable scalars in all.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{correlate, ResponseGrid};
use crate::error::{Error, Result};
use crate::grid::{check_shape, Grid3, Shape3};
use crate::kernels::{
    normalized_kernel, normalized_kernel_with_gradients, ArrowParams, CylinderParams,
    GeneoParams, KernelGradients, KernelKind, KernelTensor, NegSphereParams,
};
use crate::pointcloud::VoxelGrid;

/// Per-voxel probabilities in `[0, 1)`.
pub type ProbGrid = Grid3<f64>;
/// Binary prediction, 1 where the probability reaches `τ`.
pub type MaskGrid = Grid3<u8>;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Number of trainable scalars of the production model.
pub const N_TRAINABLE: usize = 11;

pub const TRAINABLE_NAMES: [&str; N_TRAINABLE] = [
    "cylinder.r",
    "cylinder.sigma",
    "arrow.r",
    "arrow.sigma",
    "arrow.r_c",
    "arrow.beta",
    "negsphere.r",
    "negsphere.sigma",
    "negsphere.omega",
    "lambda_cy",
    "lambda_ar",
];

/// Operators with `K − 1` free mixing weights; the last operator's weight is
/// `1 − Σ free`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneoObserver {
    pub operators: Vec<GeneoParams>,
    pub free_lambdas: Vec<f64>,
    pub kernel_shape: Shape3,
}

impl GeneoObserver {
    pub fn new(operators: Vec<GeneoParams>, free_lambdas: Vec<f64>, kernel_shape: Shape3) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::config("observer needs at least one operator"));
        }
        if free_lambdas.len() + 1 != operators.len() {
            return Err(Error::config(format!(
                "{} operators need {} free mixing weights, got {}",
                operators.len(),
                operators.len() - 1,
                free_lambdas.len()
            )));
        }
        check_shape(kernel_shape)?;
        Ok(Self {
            operators,
            free_lambdas,
            kernel_shape,
        })
    }

    /// All `K` mixing weights, the derived one last.
    pub fn lambdas(&self) -> Vec<f64> {
        let mut l = self.free_lambdas.clone();
        l.push(1.0 - self.free_lambdas.iter().sum::<f64>());
        l
    }

    pub fn n_trainable(&self) -> usize {
        self.operators.iter().map(|o| o.n_trainable()).sum::<usize>() + self.free_lambdas.len()
    }

    /// Shape parameters of every operator in order, then the free weights.
    pub fn trainable(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.operators.iter().flat_map(|o| o.trainable()).collect();
        v.extend_from_slice(&self.free_lambdas);
        v
    }

    pub fn set_trainable(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_trainable());
        let mut at = 0;
        for op in &mut self.operators {
            let n = op.n_trainable();
            op.set_trainable(&v[at..at + n]);
            at += n;
        }
        self.free_lambdas.copy_from_slice(&v[at..]);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut seen = [0usize; 3];
        for op in &self.operators {
            let kind = op.kind();
            let slot = KernelKind::ALL.iter().position(|&k| k == kind).unwrap();
            seen[slot] += 1;
            let prefix = if seen[slot] == 1 {
                kind.name().to_string()
            } else {
                format!("{}#{}", kind.name(), seen[slot])
            };
            names.extend(kind.trainable_names().iter().map(|n| format!("{prefix}.{n}")));
        }
        names.extend((0..self.free_lambdas.len()).map(|i| format!("lambda[{i}]")));
        names
    }

    pub fn compile(&self) -> Result<CompiledObserver> {
        let kernels = self
            .operators
            .iter()
            .map(|op| normalized_kernel(op, self.kernel_shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledObserver::from_kernels(kernels, self.lambdas()))
    }

    /// Compile together with the parameter Jacobian of every kernel.
    pub fn compile_with_gradients(&self) -> Result<(CompiledObserver, Vec<KernelGradients>)> {
        let mut kernels = Vec::with_capacity(self.operators.len());
        let mut grads = Vec::with_capacity(self.operators.len());
        for op in &self.operators {
            let (k, g) = normalized_kernel_with_gradients(op, self.kernel_shape)?;
            kernels.push(k);
            grads.push(g);
        }
        Ok((CompiledObserver::from_kernels(kernels, self.lambdas()), grads))
    }
}

/// Normalized kernels and their λ-weighted sum for one parameter state.
/// Rebuild after any parameter change.
#[derive(Clone, Debug)]
pub struct CompiledObserver {
    pub kernels: Vec<KernelTensor>,
    pub lambdas: Vec<f64>,
    /// `Σ λ_i K̃_i`; correlation is linear, so the observer is one pass with it.
    pub combined: Grid3<f64>,
}

impl CompiledObserver {
    fn from_kernels(kernels: Vec<KernelTensor>, lambdas: Vec<f64>) -> Self {
        let mut combined = Grid3::<f64>::zeros(kernels[0].shape());
        for (k, &l) in kernels.iter().zip(&lambdas) {
            for (c, w) in combined.as_mut_slice().iter_mut().zip(k.weights.as_slice()) {
                *c += l * w;
            }
        }
        Self {
            kernels,
            lambdas,
            combined,
        }
    }

    pub fn kernel_shape(&self) -> Shape3 {
        self.combined.shape()
    }

    pub fn observe(&self, grid: &VoxelGrid) -> Result<ResponseGrid> {
        correlate(&grid.values, &self.combined)
    }

    pub fn responses(&self, grid: &VoxelGrid) -> Result<Vec<ResponseGrid>> {
        self.kernels
            .iter()
            .map(|k| correlate(&grid.values, &k.weights))
            .collect()
    }

    pub fn forward(&self, grid: &VoxelGrid) -> Result<ProbGrid> {
        Ok(probability(&self.observe(grid)?))
    }
}

#[inline]
pub fn probability_of(h: f64) -> f64 {
    h.tanh().max(0.0)
}

/// `max(0, tanh(h))` elementwise.
pub fn probability(observer: &ResponseGrid) -> ProbGrid {
    observer.map(|&h| probability_of(h))
}

/// Mask of voxels with probability `≥ τ`.
pub fn threshold(prob: &ProbGrid, tau: f64) -> MaskGrid {
    prob.map(|&p| u8::from(p >= tau))
}

/// The production model: one operator of each kind, two free mixing weights
/// and the detection threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneNetParams {
    pub cylinder: CylinderParams,
    pub arrow: ArrowParams,
    pub negsphere: NegSphereParams,
    pub lambda_cy: f64,
    pub lambda_ar: f64,
    pub kernel_shape: Shape3,
    pub tau: f64,
}

impl SceneNetParams {
    pub fn lambda_ns(&self) -> f64 {
        1.0 - self.lambda_cy - self.lambda_ar
    }

    pub fn trainable(&self) -> [f64; N_TRAINABLE] {
        [
            self.cylinder.r,
            self.cylinder.sigma,
            self.arrow.r,
            self.arrow.sigma,
            self.arrow.r_c,
            self.arrow.beta,
            self.negsphere.r,
            self.negsphere.sigma,
            self.negsphere.omega,
            self.lambda_cy,
            self.lambda_ar,
        ]
    }

    pub fn set_trainable(&mut self, v: &[f64; N_TRAINABLE]) {
        self.cylinder.r = v[0];
        self.cylinder.sigma = v[1];
        self.arrow.r = v[2];
        self.arrow.sigma = v[3];
        self.arrow.r_c = v[4];
        self.arrow.beta = v[5];
        self.negsphere.r = v[6];
        self.negsphere.sigma = v[7];
        self.negsphere.omega = v[8];
        self.lambda_cy = v[9];
        self.lambda_ar = v[10];
    }

    /// Structural checks: shapes, the fixed `h`, `τ`, and that every value
    /// can be evaluated. Sign constraints are soft and only flagged by
    /// [`SceneNetParams::negative_entries`].
    pub fn validate(&self) -> Result<()> {
        check_shape(self.kernel_shape)?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::out_of_range("tau", self.tau, "must lie in [0, 1]"));
        }
        for (name, v) in TRAINABLE_NAMES.iter().zip(self.trainable()) {
            if !v.is_finite() {
                return Err(Error::out_of_range(*name, v, "not finite"));
            }
        }
        self.observer()?.compile().map(|_| ())
    }

    /// Trainable values (and the derived λ_NS) below `−tolerance`.
    pub fn negative_entries(&self, tolerance: f64) -> Vec<(&'static str, f64)> {
        TRAINABLE_NAMES
            .iter()
            .copied()
            .zip(self.trainable())
            .chain(std::iter::once(("lambda_ns", self.lambda_ns())))
            .filter(|(_, v)| *v < -tolerance)
            .collect()
    }

    pub fn observer(&self) -> Result<GeneoObserver> {
        GeneoObserver::new(
            vec![
                GeneoParams::Cylinder(self.cylinder),
                GeneoParams::Arrow(self.arrow),
                GeneoParams::NegSphere(self.negsphere),
            ],
            vec![self.lambda_cy, self.lambda_ar],
            self.kernel_shape,
        )
    }

    /// Inverse of [`SceneNetParams::observer`]; the operator list must be
    /// exactly cylinder, arrow, negative sphere.
    pub fn from_observer(obs: &GeneoObserver, tau: f64) -> Result<Self> {
        match obs.operators.as_slice() {
            [GeneoParams::Cylinder(c), GeneoParams::Arrow(a), GeneoParams::NegSphere(n)] => Ok(Self {
                cylinder: *c,
                arrow: *a,
                negsphere: *n,
                lambda_cy: obs.free_lambdas[0],
                lambda_ar: obs.free_lambdas[1],
                kernel_shape: obs.kernel_shape,
                tau,
            }),
            _ => Err(Error::config(
                "production model needs exactly [cylinder, arrow, negsphere]",
            )),
        }
    }

    pub fn compile(&self) -> Result<CompiledObserver> {
        self.observer()?.compile()
    }
}

/// `Σ λ_i ψ_i` with each `ψ_i` the correlation with a normalized kernel.
pub fn observer(grid: &VoxelGrid, params: &SceneNetParams) -> Result<ResponseGrid> {
    params.compile()?.observe(grid)
}

pub fn forward(grid: &VoxelGrid, params: &SceneNetParams) -> Result<ProbGrid> {
    params.compile()?.forward(grid)
}

pub fn predict(grid: &VoxelGrid, params: &SceneNetParams) -> Result<MaskGrid> {
    Ok(threshold(&forward(grid, params)?, params.tau))
}

/// Unweighted `[ψ_Cy, ψ_Ar, ψ_NS]` for post-hoc attribution.
pub fn per_geneo_responses(grid: &VoxelGrid, params: &SceneNetParams) -> Result<[ResponseGrid; 3]> {
    let mut r = params.compile()?.responses(grid)?.into_iter();
    Ok([r.next().unwrap(), r.next().unwrap(), r.next().unwrap()])
}

/// Same trainable values on a new stencil. The arrow's `h` keeps its share
/// of the depth: `round(h · k_z' / k_z)`, clamped to `[1, k_z' − 1]`.
pub fn rediscretize(params: &SceneNetParams, new_shape: Shape3) -> Result<SceneNetParams> {
    check_shape(new_shape)?;
    if new_shape[0] < 2 {
        return Err(Error::InvalidShape(new_shape));
    }
    let mut out = *params;
    let scaled = (params.arrow.h * new_shape[0] as f64 / params.kernel_shape[0] as f64).round();
    out.arrow.h = scaled.clamp(1.0, new_shape[0] as f64 - 1.0);
    out.kernel_shape = new_shape;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct LambdaDoc {
    lambda_cy: f64,
    lambda_ar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_ns: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    kernel_shape: [usize; 3],
    tau: f64,
    cylinder: CylinderParams,
    arrow: ArrowParams,
    negsphere: NegSphereParams,
    lambda: LambdaDoc,
}

/// Keys present in a checkpoint that are not trainable.
const NON_TRAINABLE_KEYS: [&str; 2] = ["h", "lambda_ns"];

pub fn checkpoint_json(params: &SceneNetParams) -> String {
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_VERSION,
        kernel_shape: params.kernel_shape,
        tau: params.tau,
        cylinder: params.cylinder,
        arrow: params.arrow,
        negsphere: params.negsphere,
        lambda: LambdaDoc {
            lambda_cy: params.lambda_cy,
            lambda_ar: params.lambda_ar,
            lambda_ns: Some(params.lambda_ns()),
        },
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn parse_checkpoint(text: &str) -> Result<SceneNetParams> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {:?} (expected {CHECKPOINT_VERSION})",
            value.get("format_version")
        )));
    }
    let doc: CheckpointDoc =
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = SceneNetParams {
        cylinder: doc.cylinder,
        arrow: doc.arrow,
        negsphere: doc.negsphere,
        lambda_cy: doc.lambda.lambda_cy,
        lambda_ar: doc.lambda.lambda_ar,
        kernel_shape: doc.kernel_shape,
        tau: doc.tau,
    };
    if let Some(ns) = doc.lambda.lambda_ns {
        if (ns - params.lambda_ns()).abs() > 1e-9 {
            return Err(Error::Checkpoint(format!(
                "lambda_ns = {ns} disagrees with 1 - lambda_cy - lambda_ar = {}",
                params.lambda_ns()
            )));
        }
    }
    params
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invariant violation: {e}")))?;
    Ok(params)
}

pub fn save_checkpoint(params: &SceneNetParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_json(params))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<SceneNetParams> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    parse_checkpoint(&text)
}

/// `(dotted name, value)` of every trainable scalar stored in a checkpoint
/// document, read from the JSON structure itself.
pub fn checkpoint_trainable_entries(text: &str) -> Result<Vec<(String, f64)>> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
    let mut out = Vec::new();
    for group in ["cylinder", "arrow", "negsphere", "lambda"] {
        let obj = value
            .get(group)
            .and_then(|v| v.as_object())
            .ok_or_else(|| Error::Checkpoint(format!("missing object `{group}`")))?;
        for (key, v) in obj {
            if NON_TRAINABLE_KEYS.contains(&key.as_str()) {
                continue;
            }
            let x = v
                .as_f64()
                .ok_or_else(|| Error::Checkpoint(format!("`{group}.{key}` is not a number")))?;
            out.push((format!("{group}.{key}"), x));
        }
    }
    Ok(out)
}

/// Human-readable parameter report grouped by operator.
pub fn inspect(params: &SceneNetParams) -> String {
    let [kz, ky, kx] = params.kernel_shape;
    let pct = |l: f64| 100.0 * l;
    let mut s = String::new();
    let _ = writeln!(s, "SCENE-Net observer: kernel {kz}x{ky}x{kx}, detection threshold tau = {:.2}", params.tau);
    let _ = writeln!(s, "(tau is tuned on validation data and is not trainable)");
    let row = |s: &mut String, name: &str, v: f64, note: &str| {
        let _ = writeln!(s, "    {name:<10} = {v:>12.6}   {note}");
    };
    let t = "[trainable]";

    let _ = writeln!(s);
    let _ = writeln!(s, "Cylinder         holds {:6.2}% of the output", pct(params.lambda_cy));
    row(&mut s, "r", params.cylinder.r, t);
    row(&mut s, "sigma", params.cylinder.sigma, t);
    row(&mut s, "lambda_cy", params.lambda_cy, t);

    let _ = writeln!(s, "Arrow            holds {:6.2}% of the output", pct(params.lambda_ar));
    row(&mut s, "r", params.arrow.r, t);
    row(&mut s, "sigma", params.arrow.sigma, t);
    row(&mut s, "h*", params.arrow.h, "[fixed: h* is not trainable]");
    row(&mut s, "r_c", params.arrow.r_c, t);
    row(&mut s, "beta", params.arrow.beta, t);
    row(&mut s, "lambda_ar", params.lambda_ar, t);

    let _ = writeln!(s, "Negative sphere  holds {:6.2}% of the output", pct(params.lambda_ns()));
    row(&mut s, "r", params.negsphere.r, t);
    row(&mut s, "sigma", params.negsphere.sigma, t);
    row(&mut s, "omega", params.negsphere.omega, t);
    row(
        &mut s,
        "lambda_ns*",
        params.lambda_ns(),
        "[derived: 1 - lambda_cy - lambda_ar]",
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{N_TRAINABLE} trainable parameters");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_params() -> SceneNetParams {
        SceneNetParams {
            cylinder: CylinderParams { r: 1.5, sigma: 2.0 },
            arrow: ArrowParams {
                r: 1.0,
                sigma: 3.0,
                h: 6.0,
                r_c: 2.0,
                beta: 0.2,
            },
            negsphere: NegSphereParams {
                r: 3.0,
                sigma: 4.0,
                omega: 0.4,
            },
            lambda_cy: 0.1,
            lambda_ar: 0.6,
            kernel_shape: [9, 9, 9],
            tau: 0.5,
        }
    }

    #[test]
    fn trainable_roundtrip_and_count() {
        let p = sample_params();
        let mut q = p;
        q.set_trainable(&p.trainable());
        assert_eq!(p, q);
        let obs = p.observer().unwrap();
        assert_eq!(obs.n_trainable(), N_TRAINABLE);
        assert_eq!(obs.trainable(), p.trainable().to_vec());
        assert_eq!(SceneNetParams::from_observer(&obs, p.tau).unwrap(), p);
    }

    #[test]
    fn probability_head_values() {
        assert_eq!(probability_of(0.0), 0.0);
        assert_eq!(probability_of(-5.0), 0.0);
        assert!((probability_of(0.5) - 0.462117157).abs() < 1e-9);
    }

    #[test]
    fn threshold_extremes() {
        let prob = Grid3::from_vec([1, 1, 3], vec![0.0, 0.3, 0.7]).unwrap();
        assert!(threshold(&prob, 0.0).as_slice().iter().all(|&m| m == 1));
        assert!(threshold(&prob, 1.0).as_slice().iter().all(|&m| m == 0));
        assert_eq!(threshold(&prob, 0.5).as_slice(), &[0, 0, 1]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = sample_params();
        let text = checkpoint_json(&p);
        assert_eq!(parse_checkpoint(&text).unwrap(), p);
        assert_eq!(checkpoint_trainable_entries(&text).unwrap().len(), N_TRAINABLE);
    }

    #[test]
    fn checkpoint_missing_field_named() {
        let text = checkpoint_json(&sample_params()).replacen("\"sigma\"", "\"sigmx\"", 1);
        let err = parse_checkpoint(&text).unwrap_err().to_string();
        assert!(err.contains("sigma"), "{err}");
    }

    #[test]
    fn checkpoint_version_mismatch() {
        let text = checkpoint_json(&sample_params()).replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(parse_checkpoint(&text), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn handwritten_checkpoint_derives_lambda_ns() {
        let text = r#"{
            "format_version": 1, "kernel_shape": [9, 9, 9], "tau": 0.4,
            "cylinder": {"r": 1.0, "sigma": 2.0},
            "arrow": {"r": 1.0, "sigma": 2.0, "h": 6, "r_c": 1.5, "beta": 0.2},
            "negsphere": {"r": 2.0, "sigma": 3.0, "omega": 0.5},
            "lambda": {"lambda_cy": 0.1, "lambda_ar": 0.6}
        }"#;
        let p = parse_checkpoint(text).unwrap();
        assert!((p.lambda_ns() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invariant_violation_on_load() {
        let mut p = sample_params();
        p.arrow.h = 9.0;
        assert!(parse_checkpoint(&checkpoint_json(&p)).is_err());
        let mut p = sample_params();
        p.tau = 1.5;
        assert!(parse_checkpoint(&checkpoint_json(&p)).is_err());
    }

    #[test]
    fn inspect_report() {
        let report = inspect(&sample_params());
        assert_eq!(report.matches("[trainable]").count(), N_TRAINABLE);
        assert!(report.contains("30.00%"));
        assert!(report.contains("h* is not trainable"));
    }

    #[test]
    fn rediscretize_rules() {
        let p = sample_params();
        let same = rediscretize(&p, p.kernel_shape).unwrap();
        assert_eq!(same, p);
        let thin = rediscretize(&p, [9, 5, 5]).unwrap();
        assert_eq!(thin.trainable(), p.trainable());
        assert_eq!(thin.arrow.h, p.arrow.h);
        let tall = rediscretize(&p, [12, 5, 5]).unwrap();
        assert_eq!(tall.arrow.h, (6.0f64 * 12.0 / 9.0).round());
        assert!(rediscretize(&p, [1, 5, 5]).is_err());
    }

    #[test]
    fn observer_endpoint_is_cylinder_alone() {
        let mut p = sample_params();
        p.lambda_cy = 1.0;
        p.lambda_ar = 0.0;
        let grid = VoxelGrid::from_values(Grid3::from_fn([12, 12, 12], |[z, y, x]| {
            f64::from(((z * 7 + y * 3 + x) % 5 == 0) as u8)
        }));
        let obs = observer(&grid, &p).unwrap();
        let [cy, _, _] = per_geneo_responses(&grid, &p).unwrap();
        for (a, b) in obs.as_slice().iter().zip(cy.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
