//! Dense row-major `f64` tensors.
//!
//! Only what the optimizer, the mask code and the switching criteria need:
//! coordinate-wise arithmetic, norms, and views over consecutive groups of
//! the innermost axis.

use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Square,
    Abs,
    Scale(f64),
    Log,
    Exp,
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L1,
    L2,
    Linf,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// data length equals the product of the extents.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    /// Zeros with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the innermost axis.
    pub fn inner_extent(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(dim(format!("{what}: shape {:?} does not match {:?}", self.shape, other.shape)))
        }
    }

    /// Applies `op` coordinate-wise. Binary ops need `other` with an equal
    /// shape; unary ops ignore it.
    pub fn elementwise(&self, op: ElementwiseOp, other: Option<&Tensor>) -> Result<Tensor> {
        let data = if op.is_binary() {
            let b = other.ok_or_else(|| dim(format!("{op:?} needs a second operand")))?;
            self.check_same_shape(b, "elementwise")?;
            let f: fn(f64, f64) -> f64 = match op {
                ElementwiseOp::Add => |x, y| x + y,
                ElementwiseOp::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            match op {
                ElementwiseOp::Square => self.data.iter().map(|x| x * x).collect(),
                ElementwiseOp::Abs => self.data.iter().map(|x| x.abs()).collect(),
                ElementwiseOp::Scale(c) => self.data.iter().map(|x| c * x).collect(),
                ElementwiseOp::Exp => self.data.iter().map(|x| x.exp()).collect(),
                ElementwiseOp::Log => {
                    if let Some(bad) = self.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                        return Err(domain(format!("log of non-positive value {bad}")));
                    }
                    self.data.iter().map(|x| x.ln()).collect()
                }
                _ => unreachable!(),
            }
        };
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Add, Some(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Sub, Some(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Mul, Some(other))
    }

    pub fn square(&self) -> Tensor {
        self.map(|x| x * x)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Log, None)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Sequential reduction, so the result does not depend on threading.
    pub fn norm(&self, kind: NormKind) -> Result<f64> {
        if self.data.is_empty() {
            return Err(domain("norm of an empty tensor"));
        }
        Ok(match kind {
            NormKind::L1 => self.data.iter().map(|x| x.abs()).sum(),
            NormKind::L2 => self.data.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormKind::Linf => self.data.iter().fold(0.0, |acc, x| acc.max(x.abs())),
        })
    }

    /// Views over consecutive `m`-element groups along the innermost axis.
    /// No padding: the innermost extent must be a multiple of `m`.
    pub fn group_chunks(&self, m: usize) -> Result<std::slice::Chunks<'_, f64>> {
        check_groupable(&self.shape, m)?;
        Ok(self.data.chunks(m))
    }
}

pub(crate) fn check_groupable(shape: &[usize], m: usize) -> Result<()> {
    let inner = shape.last().copied().unwrap_or(1);
    if m == 0 || inner % m != 0 {
        return Err(dim(format!("innermost extent {inner} of shape {shape:?} is not divisible by group size {m}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[1.0, -2.0, 3.0]).square().data(), &[1.0, 4.0, 9.0]);
        assert_eq!(t(&[1.0, 0.0, 2.0]).mul(&t(&[5.0, 7.0, 3.0])).unwrap().data(), &[5.0, 0.0, 6.0]);
        assert!(matches!(t(&[1.0, 2.0]).add(&t(&[1.0, 2.0, 3.0])), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn log_domain() {
        assert!(matches!(t(&[1.0, 0.0]).ln(), Err(crate::Error::Domain(_))));
        assert!(matches!(t(&[-1.0]).ln(), Err(crate::Error::Domain(_))));
        let l = t(&[1.0, std::f64::consts::E]).ln().unwrap();
        assert_eq!(l.data()[0], 0.0);
        assert!((l.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn binary_op_without_operand_is_rejected() {
        assert!(t(&[1.0]).elementwise(ElementwiseOp::Add, None).is_err());
    }

    #[test]
    fn norm_examples() {
        assert_eq!(t(&[1.0, -2.0, 3.0]).norm(NormKind::L1).unwrap(), 6.0);
        assert_eq!(t(&[3.0, 4.0]).norm(NormKind::L2).unwrap(), 5.0);
        assert_eq!(t(&[0.1, -0.5, 0.2]).norm(NormKind::Linf).unwrap(), 0.5);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn grouping_examples() {
        let a = Tensor::zeros(&[2, 4]).unwrap();
        assert_eq!(a.group_chunks(4).unwrap().count(), 2);
        let b = Tensor::zeros(&[8]).unwrap();
        assert_eq!(b.group_chunks(4).unwrap().count(), 2);
        let c = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(c.group_chunks(2), Err(crate::Error::Dimension(_))));
        // the outer extent is free, only the innermost one must divide
        let d = Tensor::zeros(&[3, 4]).unwrap();
        assert_eq!(d.group_chunks(2).unwrap().count(), 6);
    }

    #[test]
    fn ops_do_not_touch_inputs() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[3.0, 4.0]);
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.add(&b).unwrap();
        let _ = a.scale(3.0);
        assert_eq!(a, a0);
        assert_eq!(b, b0);
    }

    fn tensor_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(a, b, m)| {
            let shape = vec![a, b * m];
            let n = a * b * m;
            (Just(shape), prop::collection::vec(-1e3f64..1e3, n))
        })
    }

    proptest! {
        #[test]
        fn group_round_trip((shape, data) in tensor_strategy(), m in 1usize..4) {
            let tensor = Tensor::new(shape.clone(), data.clone()).unwrap();
            if shape[1] % m == 0 {
                let flat: Vec<f64> = tensor.group_chunks(m).unwrap().flatten().copied().collect();
                prop_assert_eq!(flat, data);
            } else {
                prop_assert!(tensor.group_chunks(m).is_err());
            }
        }

        #[test]
        fn norm_ordering((shape, data) in tensor_strategy()) {
            let tensor = Tensor::new(shape, data).unwrap();
            let l1 = tensor.norm(NormKind::L1).unwrap();
            let l2 = tensor.norm(NormKind::L2).unwrap();
            let linf = tensor.norm(NormKind::Linf).unwrap();
            prop_assert!(l1 >= linf);
            prop_assert!(l2 <= l1 * (1.0 + 1e-12));
            prop_assert!(linf <= l2 * (1.0 + 1e-12));
        }
    }
}
