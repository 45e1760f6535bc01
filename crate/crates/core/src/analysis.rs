//! Per-rate weight allocation of poly-scale layers.
//!
//! For each dilation rate `d` in a layer, the proxy is the largest mean
//! absolute kernel weight among all kernels `(c, k)` with `D(c, k) = d`.
//! Proxies are normalized to sum to one within the layer. Repeated pattern
//! slots with the same rate form a single class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorArchive;
use crate::lattice::{DilationMatrix, DilationPattern};
use crate::tensor::Tensor4;

/// Normalized allocation proportion per dilation rate.
pub fn scale_allocation(weight: &Tensor4, lattice: &DilationMatrix) -> Result<BTreeMap<u32, f64>> {
    let [cout, cin_pg, kh, kw] = weight.dims();
    if cout != lattice.rows() || cin_pg != lattice.cols() {
        return Err(Error::shape(format!(
            "weight is {cout}x{cin_pg} kernels, lattice is {}x{}",
            lattice.rows(),
            lattice.cols()
        )));
    }
    let taps = kh * kw;
    if taps == 0 {
        return Err(Error::shape("kernels have no taps"));
    }

    let mut proxy: BTreeMap<u32, f64> = BTreeMap::new();
    for c in 0..cout {
        for k in 0..cin_pg {
            let mean = weight.plane(c, k).iter().map(|v| v.abs()).sum::<f64>() / taps as f64;
            let slot = proxy.entry(lattice.get(c, k)).or_insert(0.0);
            if mean > *slot {
                *slot = mean;
            }
        }
    }

    let total: f64 = proxy.values().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::DegenerateLayer(String::new()));
    }
    for v in proxy.values_mut() {
        *v /= total;
    }
    Ok(proxy)
}

/// How to rebuild the lattice of one archived layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticeSpec {
    pub name: String,
    pub stage: usize,
    pub pattern: DilationPattern,
    pub groups: usize,
}

impl LatticeSpec {
    /// Lattice for a weight tensor of the given dims. One input channel per
    /// group with `groups == Cout` means depthwise.
    pub fn lattice_for(&self, dims: [usize; 4]) -> Result<DilationMatrix> {
        let [cout, cin_pg, _, _] = dims;
        if cin_pg == 1 && self.groups == cout && cout > 1 {
            DilationMatrix::depthwise(cout, &self.pattern)
        } else {
            DilationMatrix::psconv_grouped(cout, cin_pg * self.groups, self.groups, &self.pattern)
        }
    }
}

/// Stage number from a `stageN.` or `layerN.` name prefix, else 0.
pub fn stage_from_name(name: &str) -> usize {
    let head = name.split('.').next().unwrap_or("");
    ["stage", "layer"]
        .iter()
        .find_map(|p| head.strip_prefix(p)?.parse().ok())
        .unwrap_or(0)
}

/// Every rank-4 tensor with square spatial kernels larger than 1×1, in
/// archive order, paired with `pattern` and `groups`.
pub fn default_lattice_specs(
    archive: &TensorArchive,
    pattern: &DilationPattern,
    groups: usize,
) -> Vec<LatticeSpec> {
    archive
        .tensors()
        .iter()
        .filter(|t| t.dims.len() == 4 && t.dims[2] == t.dims[3] && t.dims[2] > 1)
        .map(|t| LatticeSpec {
            name: t.name.clone(),
            stage: stage_from_name(&t.name),
            pattern: pattern.clone(),
            groups,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub layer_index: usize,
    pub stage: usize,
    pub dilation: u32,
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub schema: String,
    pub rows: Vec<AllocationRow>,
}

pub const ALLOCATION_SCHEMA: &str = "psconv.allocation/1";

impl AllocationReport {
    pub fn layer_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.layer_index)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Proportions of layer `index`, keyed by rate.
    pub fn layer(&self, index: usize) -> BTreeMap<u32, f64> {
        self.rows
            .iter()
            .filter(|r| r.layer_index == index)
            .map(|r| (r.dilation, r.proportion))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_index,stage,dilation,proportion\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.17e}\n",
                r.layer_index, r.stage, r.dilation, r.proportion
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn allocation_report(archive: &TensorArchive, specs: &[LatticeSpec]) -> Result<AllocationReport> {
    if archive.is_empty() || specs.is_empty() {
        return Err(Error::EmptyArchive);
    }
    let mut rows = Vec::new();
    for (layer_index, spec) in specs.iter().enumerate() {
        let named = archive
            .get(&spec.name)
            .ok_or_else(|| Error::MissingLayer(spec.name.clone()))?;
        let weight = named.to_tensor4().ok_or_else(|| {
            Error::shape(format!(
                "layer `{}` has dims {:?}, expected rank 4",
                spec.name, named.dims
            ))
        })?;
        let lattice = spec.lattice_for(weight.dims())?;
        let proportions = scale_allocation(&weight, &lattice).map_err(|e| match e {
            Error::DegenerateLayer(_) => Error::DegenerateLayer(spec.name.clone()),
            other => other,
        })?;
        rows.extend(proportions.into_iter().map(|(dilation, proportion)| AllocationRow {
            layer_index,
            stage: spec.stage,
            dilation,
            proportion,
        }));
    }
    Ok(AllocationReport {
        schema: ALLOCATION_SCHEMA.into(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::NamedTensor;
    use crate::tensor::Rng;

    fn psconv8() -> DilationMatrix {
        DilationMatrix::psconv(8, 8, &DilationPattern::default()).unwrap()
    }

    fn constant(dims: [usize; 4], v: f64) -> Tensor4 {
        let n = dims.iter().product();
        Tensor4::from_vec(dims, vec![v; n]).unwrap()
    }

    #[test]
    fn uniform_weights_split_evenly() {
        let p = scale_allocation(&constant([8, 8, 3, 3], 0.7), &psconv8()).unwrap();
        assert_eq!(p.keys().copied().collect::<Vec<_>>(), vec![1, 2, 4]);
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zeroed_rate_drops_out() {
        let d = psconv8();
        let mut g = constant([8, 8, 3, 3], -1.5);
        for c in 0..8 {
            for k in 0..8 {
                if d.get(c, k) == 4 {
                    g.plane_mut(c, k).fill(0.0);
                }
            }
        }
        let p = scale_allocation(&g, &d).unwrap();
        assert_eq!(p[&4], 0.0);
        assert!((p[&1] - 0.5).abs() <= 1e-12);
        assert!((p[&2] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn random_matches_exhaustive_scan() {
        let d = psconv8();
        let g = Tensor4::randn([8, 8, 3, 3], &mut Rng::new(9), 1.0).unwrap();
        // Exhaustive scan keyed by each pattern slot's rate.
        let mut best: BTreeMap<u32, f64> = BTreeMap::new();
        for c in 0..8 {
            for k in 0..8 {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += g.get(c, k, i, j).abs();
                    }
                }
                let m = s / 9.0;
                let e = best.entry(d.get(c, k)).or_insert(0.0);
                *e = e.max(m);
            }
        }
        let total: f64 = best.values().sum();
        let oracle: BTreeMap<u32, f64> = best.into_iter().map(|(k, v)| (k, v / total)).collect();
        assert_eq!(scale_allocation(&g, &d).unwrap(), oracle);
    }

    #[test]
    fn scale_invariant() {
        let d = psconv8();
        let g = Tensor4::randn([8, 8, 3, 3], &mut Rng::new(4), 1.0).unwrap();
        let mut g2 = g.clone();
        g2.scale(37.5);
        let a = scale_allocation(&g, &d).unwrap();
        let b = scale_allocation(&g2, &d).unwrap();
        for (k, v) in &a {
            assert!((v - b[k]).abs() <= 1e-12);
        }
        assert!((a.values().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn boosting_a_rate_raises_its_share() {
        let d = psconv8();
        let g = Tensor4::randn([8, 8, 3, 3], &mut Rng::new(5), 1.0).unwrap();
        let mut boosted = g.clone();
        for c in 0..8 {
            for k in 0..8 {
                if d.get(c, k) == 2 {
                    boosted.plane_mut(c, k).iter_mut().for_each(|v| *v *= 2.0);
                }
            }
        }
        let a = scale_allocation(&g, &d).unwrap();
        let b = scale_allocation(&boosted, &d).unwrap();
        assert!(b[&2] > a[&2]);
    }

    #[test]
    fn degenerate_and_mismatch() {
        assert!(matches!(
            scale_allocation(&constant([8, 8, 3, 3], 0.0), &psconv8()),
            Err(Error::DegenerateLayer(_))
        ));
        assert!(matches!(
            scale_allocation(&constant([8, 4, 3, 3], 1.0), &psconv8()),
            Err(Error::Shape(_))
        ));
    }

    fn spec(name: &str) -> LatticeSpec {
        LatticeSpec {
            name: name.into(),
            stage: stage_from_name(name),
            pattern: DilationPattern::default(),
            groups: 1,
        }
    }

    #[test]
    fn single_layer_report() {
        let mut a = TensorArchive::new();
        a.push(NamedTensor::from_tensor4("stage2.conv", &constant([4, 4, 3, 3], 1.0)))
            .unwrap();
        let r = allocation_report(&a, &[spec("stage2.conv")]).unwrap();
        assert_eq!(r.layer_count(), 1);
        assert!(r.rows.iter().all(|row| row.stage == 2));
        assert!(r.to_csv().starts_with("layer_index,stage,dilation,proportion\n"));
    }

    #[test]
    fn report_errors() {
        let empty = TensorArchive::new();
        assert!(matches!(
            allocation_report(&empty, &[spec("x")]),
            Err(Error::EmptyArchive)
        ));
        let mut a = TensorArchive::new();
        a.push(NamedTensor::from_tensor4("w", &constant([4, 4, 3, 3], 1.0)))
            .unwrap();
        assert!(matches!(
            allocation_report(&a, &[spec("missing")]),
            Err(Error::MissingLayer(_))
        ));
        a.push(NamedTensor::from_tensor4("z", &constant([4, 4, 3, 3], 0.0)))
            .unwrap();
        match allocation_report(&a, &[spec("w"), spec("z")]) {
            Err(Error::DegenerateLayer(name)) => assert_eq!(name, "z"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn monotone_rate_four_column() {
        let d = DilationMatrix::psconv(8, 8, &DilationPattern::default()).unwrap();
        let mut archive = TensorArchive::new();
        let mut specs = Vec::new();
        for layer in 0..16 {
            let mut g = constant([8, 8, 3, 3], 1.0);
            for c in 0..8 {
                for k in 0..8 {
                    if d.get(c, k) == 4 {
                        g.plane_mut(c, k).fill(0.5 + 0.25 * layer as f64);
                    }
                }
            }
            let name = format!("layer{}.{layer}.conv2", 1 + layer / 4);
            archive.push(NamedTensor::from_tensor4(name.clone(), &g)).unwrap();
            specs.push(spec(&name));
        }
        let r = allocation_report(&archive, &specs).unwrap();
        let col: Vec<f64> = (0..16).map(|i| r.layer(i)[&4]).collect();
        assert!(col.windows(2).all(|w| w[1] >= w[0]), "{col:?}");
        assert!(col[15] > col[0]);
    }

    #[test]
    fn depthwise_spec() {
        let s = LatticeSpec {
            groups: 8,
            ..spec("dw")
        };
        let d = s.lattice_for([8, 1, 3, 3]).unwrap();
        assert_eq!(d.entries(), &[1, 2, 1, 4, 1, 2, 1, 4]);
    }

    #[test]
    fn stage_prefixes() {
        assert_eq!(stage_from_name("stage2.conv.weight"), 2);
        assert_eq!(stage_from_name("layer3.1.conv2"), 3);
        assert_eq!(stage_from_name("fc.weight"), 0);
    }
}
