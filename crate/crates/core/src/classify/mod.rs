//! Flat and local-per-node hierarchical prediction, and activation maps.
//!
//! The hierarchical model is two independent binary classifiers: the root
//! separates Normal from Pneumonia-like images, and only images it routes to
//! the Pneumonia side reach the leaf, which separates Pneumonia from COVID19.

pub mod cam;
pub mod network;

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_rows;
use crate::tensor::Tensor;

pub use cam::{activation_map, cam_from_features, effective_class_weights, heatmap_rgb};
pub use network::{Forward, Network, PassMode};

/// Anything that maps an image batch `(n, r, r, 3)` to logits `(n, k)`.
pub trait Classifier: Send + Sync {
    fn input_resolution(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for Network {
    fn input_resolution(&self) -> usize {
        Network::input_resolution(self)
    }

    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.infer(batch).map(|(_, l)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Flat,
    Root,
    Leaf,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Flat => "flat",
            Stage::Root => "root",
            Stage::Leaf => "leaf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: Stage,
    pub probs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Classifiers in the order they fired.
    pub trace: Vec<StageOutput>,
}

impl Prediction {
    pub fn stage(&self, stage: Stage) -> Option<&StageOutput> {
        self.trace.iter().find(|s| s.stage == stage)
    }

    /// `(p_normal, p_pneumonia, p_covid)`. Hierarchical predictions chain the
    /// root and leaf probabilities; when the leaf never ran, only `p_normal`
    /// is known.
    pub fn class_probs(&self) -> [Option<f32>; 3] {
        if let Some(f) = self.stage(Stage::Flat) {
            return [Some(f.probs[0]), Some(f.probs[1]), Some(f.probs[2])];
        }
        let Some(root) = self.stage(Stage::Root) else {
            return [None; 3];
        };
        match self.stage(Stage::Leaf) {
            Some(leaf) => [
                Some(root.probs[0]),
                Some(root.probs[1] * leaf.probs[0]),
                Some(root.probs[1] * leaf.probs[1]),
            ],
            None => [Some(root.probs[0]), None, None],
        }
    }

    pub fn trace_string(&self) -> String {
        self.trace
            .iter()
            .map(|s| s.stage.as_str())
            .collect::<Vec<_>>()
            .join(">")
    }
}

/// Index of the largest value; exact ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_batch(model: &dyn Classifier, batch: &Tensor) -> Result<usize> {
    let r = model.input_resolution();
    match *batch.shape() {
        [n, h, w, 3] if h == r && w == r => Ok(n),
        [_, h, w, 3] => Err(Error::ResolutionMismatch {
            expected: r,
            found: if h != r { h } else { w },
        }),
        _ => Err(Error::shape(
            "predict",
            "input",
            format!("(n, {r}, {r}, 3)"),
            format!("{:?}", batch.shape()),
        )),
    }
}

fn probs(model: &dyn Classifier, batch: &Tensor) -> Result<Tensor> {
    let n = check_batch(model, batch)?;
    let logits = model.logits(batch)?;
    if logits.shape() != [n, model.num_classes()] {
        return Err(Error::shape(
            "predict",
            "logits",
            format!("[{n}, {}]", model.num_classes()),
            format!("{:?}", logits.shape()),
        ));
    }
    Ok(softmax_rows(&logits))
}

const CHUNK: usize = 16;

fn chunks(batch: &Tensor) -> Vec<Tensor> {
    let n = batch.shape()[0];
    let per = batch.len() / n.max(1);
    let mut shape = batch.shape().to_vec();
    (0..n)
        .step_by(CHUNK)
        .map(|s| {
            let e = (s + CHUNK).min(n);
            shape[0] = e - s;
            Tensor::new(shape.clone(), batch.data()[s * per..e * per].to_vec()).expect("slice of batch")
        })
        .collect()
}

/// Flat 3-class predictions for every image of `batch`, in order.
pub fn predict_flat(model: &dyn Classifier, batch: &Tensor) -> Result<Vec<Prediction>> {
    if model.num_classes() != 3 {
        return Err(Error::InvalidArgument(format!(
            "flat model needs 3 classes, has {}",
            model.num_classes()
        )));
    }
    check_batch(model, batch)?;
    let parts: Vec<Tensor> = chunks(batch)
        .par_iter()
        .map(|c| probs(model, c))
        .collect::<Result<_>>()?;
    Ok(parts
        .iter()
        .flat_map(|p| p.data().chunks(3).map(<[f32]>::to_vec).collect::<Vec<_>>())
        .map(|p| Prediction {
            label: Label::ALL[argmax(&p)],
            trace: vec![StageOutput {
                stage: Stage::Flat,
                probs: p,
            }],
        })
        .collect())
}

pub struct HierModel {
    pub root: Box<dyn Classifier>,
    pub leaf: Box<dyn Classifier>,
}

impl HierModel {
    pub fn new(root: Box<dyn Classifier>, leaf: Box<dyn Classifier>) -> Result<Self> {
        if root.num_classes() != 2 || leaf.num_classes() != 2 {
            return Err(Error::InvalidArgument("hierarchical sub-models must be binary".into()));
        }
        if root.input_resolution() != leaf.input_resolution() {
            return Err(Error::ResolutionMismatch {
                expected: root.input_resolution(),
                found: leaf.input_resolution(),
            });
        }
        Ok(Self { root, leaf })
    }

    pub fn input_resolution(&self) -> usize {
        self.root.input_resolution()
    }
}

/// Root first; images routed to Normal stop there, the rest go to the leaf.
/// The leaf only ever sees the images the root routed to it.
pub fn predict_hier(model: &HierModel, batch: &Tensor) -> Result<Vec<Prediction>> {
    let n = check_batch(model.root.as_ref(), batch)?;
    let root = chunks(batch)
        .par_iter()
        .map(|c| probs(model.root.as_ref(), c))
        .collect::<Result<Vec<_>>>()?;
    let root: Vec<Vec<f32>> = root
        .iter()
        .flat_map(|p| p.data().chunks(2).map(<[f32]>::to_vec).collect::<Vec<_>>())
        .collect();

    let routed: Vec<usize> = (0..n).filter(|&i| argmax(&root[i]) == 1).collect();
    let per = batch.len() / n.max(1);
    let mut leaf_probs = vec![None; n];
    if !routed.is_empty() {
        let mut data = Vec::with_capacity(routed.len() * per);
        for &i in &routed {
            data.extend_from_slice(&batch.data()[i * per..(i + 1) * per]);
        }
        let mut shape = batch.shape().to_vec();
        shape[0] = routed.len();
        let sub = Tensor::new(shape, data)?;
        let parts = chunks(&sub)
            .par_iter()
            .map(|c| probs(model.leaf.as_ref(), c))
            .collect::<Result<Vec<_>>>()?;
        let flat: Vec<Vec<f32>> = parts
            .iter()
            .flat_map(|p| p.data().chunks(2).map(<[f32]>::to_vec).collect::<Vec<_>>())
            .collect();
        for (&i, p) in routed.iter().zip(flat) {
            leaf_probs[i] = Some(p);
        }
    }

    Ok(root
        .into_iter()
        .zip(leaf_probs)
        .map(|(r, l)| {
            let mut trace = vec![StageOutput {
                stage: Stage::Root,
                probs: r,
            }];
            let label = match l {
                None => Label::Normal,
                Some(p) => {
                    let label = [Label::Pneumonia, Label::Covid19][argmax(&p)];
                    trace.push(StageOutput {
                        stage: Stage::Leaf,
                        probs: p,
                    });
                    label
                }
            };
            Prediction { label, trace }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Flat,
    Hier,
}

impl PredictMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictMode::Flat => "flat",
            PredictMode::Hier => "hier",
        }
    }
}

/// `path,mode,label,p_normal,p_pneumonia,p_covid,stage_trace`; probabilities
/// the model never computed are left empty.
pub fn predictions_csv(rows: &[(String, PredictMode, Prediction)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "path",
        "mode",
        "label",
        "p_normal",
        "p_pneumonia",
        "p_covid",
        "stage_trace",
    ])?;
    for (path, mode, p) in rows {
        let mut rec = vec![path.clone(), mode.as_str().to_string(), p.label.to_string()];
        rec.extend(
            p.class_probs()
                .iter()
                .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()),
        );
        rec.push(p.trace_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// One-line human summary, e.g. `COVID19  N=0.010 P=0.120 C=0.870  [root>leaf]`.
pub fn describe(p: &Prediction) -> String {
    let mut s = format!("{:<9}", p.label.as_str());
    for (tag, v) in ["N", "P", "C"].iter().zip(p.class_probs()) {
        match v {
            Some(x) => {
                let _ = write!(s, " {tag}={x:.3}");
            }
            None => {
                let _ = write!(s, " {tag}=-");
            }
        }
    }
    let _ = write!(s, "  [{}]", p.trace_string());
    s
}

#[cfg(test)]
pub(crate) mod stub {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;

    /// Returns fixed logits for every image and counts the images it saw.
    pub struct Fixed {
        pub logits: Vec<f32>,
        pub resolution: usize,
        pub seen: AtomicUsize,
    }

    impl Fixed {
        pub fn new(logits: &[f32], resolution: usize) -> Self {
            Self {
                logits: logits.to_vec(),
                resolution,
                seen: AtomicUsize::new(0),
            }
        }
    }

    impl Classifier for Fixed {
        fn input_resolution(&self) -> usize {
            self.resolution
        }
        fn num_classes(&self) -> usize {
            self.logits.len()
        }
        fn logits(&self, batch: &Tensor) -> Result<Tensor> {
            let n = batch.shape()[0];
            self.seen.fetch_add(n, Ordering::SeqCst);
            Tensor::new(vec![n, self.logits.len()], self.logits.repeat(n))
        }
    }
}
