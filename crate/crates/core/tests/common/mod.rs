//! Oracles shared by the integration tests. They are written from the
//! operator definitions, independently of the library's loops.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use psconv::tensor::Tensor4;

/// `pattern[(k − c) mod t]`.
pub fn lattice_entry(pattern: &[u32], c: usize, k: usize) -> u32 {
    let t = pattern.len() as isize;
    pattern[((k as isize - c as isize).rem_euclid(t)) as usize]
}

/// Direct evaluation of
/// `H[n,c,x,y] = Σ_k Σ_i Σ_j G[c,k,i,j] · F[n, g·Cin_pg + k, x·s + (i−r)·d, y·s + (j−r)·d]`
/// with out-of-range reads as zero, accumulating over k, then i, then j.
pub fn naive_conv(
    f: &Tensor4,
    g: &Tensor4,
    stride: usize,
    groups: usize,
    rate: impl Fn(usize, usize) -> u32,
) -> Tensor4 {
    let [n, cin, h, w] = f.dims();
    let [cout, cin_pg, kh, kw] = g.dims();
    assert_eq!(cin, cin_pg * groups);
    let r = (kh as isize - 1) / 2;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let cout_pg = cout / groups;
    let mut out = Tensor4::zeros([n, cout, ho, wo]).unwrap();
    for b in 0..n {
        for c in 0..cout {
            let grp = c / cout_pg;
            for x in 0..ho {
                for y in 0..wo {
                    let mut acc = 0.0;
                    for k in 0..cin_pg {
                        let d = rate(c, k) as isize;
                        for i in 0..kh {
                            for j in 0..kw {
                                let px = (x * stride) as isize + (i as isize - r) * d;
                                let py = (y * stride) as isize + (j as isize - r) * d;
                                if px < 0 || py < 0 || px >= h as isize || py >= w as isize {
                                    continue;
                                }
                                acc += g.get(c, k, i, j)
                                    * f.get(b, grp * cin_pg + k, px as usize, py as usize);
                            }
                        }
                    }
                    out.set(b, c, x, y, acc);
                }
            }
        }
    }
    out
}

pub fn bits(t: &Tensor4) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn psconv_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_psconv"))
}

pub fn run(args: &[&str]) -> Output {
    psconv_bin()
        .args(args)
        .env_remove("PSCONV_THREADS")
        .output()
        .expect("spawn psconv")
}

/// Validates `json` against `schemas/<name>.schema.json`; returns the
/// validation errors as strings.
pub fn schema_errors(name: &str, json: &serde_json::Value) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(format!("{name}.schema.json"));
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    validator.iter_errors(json).map(|e| e.to_string()).collect()
}

/// Exhaustive structural check of the default `{1,2,1,4}` lattice at
/// `Cin = Cout = n`: row and column value multisets, the cyclic shift, and
/// the rearrangement's block constancy and permutation round trip.
pub fn verify_default_lattice(n: usize) -> Result<(), String> {
    use psconv::conv::{permute_channels, unpermute_channels};
    use psconv::lattice::{invert_permutation, DilationMatrix, DilationPattern};
    use std::collections::BTreeMap;

    let pattern = [1u32, 2, 1, 4];
    let t = pattern.len();
    let d = DilationMatrix::psconv(n, n, &DilationPattern::default()).map_err(|e| e.to_string())?;

    for c in 0..n {
        for k in 0..n {
            if d.get(c, k) != lattice_entry(&pattern, c, k) {
                return Err(format!("D({c},{k}) = {}", d.get(c, k)));
            }
        }
    }

    // Slot counts: every slot appears n/t times per row and per column, so
    // rate 1 (two slots) appears 2n/t times.
    let mut want: BTreeMap<u32, usize> = BTreeMap::new();
    for &r in &pattern {
        *want.entry(r).or_default() += n / t;
    }
    for i in 0..n {
        let mut row: BTreeMap<u32, usize> = BTreeMap::new();
        let mut col: BTreeMap<u32, usize> = BTreeMap::new();
        for j in 0..n {
            *row.entry(d.get(i, j)).or_default() += 1;
            *col.entry(d.get(j, i)).or_default() += 1;
        }
        if row != want || col != want {
            return Err(format!("multiset mismatch at index {i}: row {row:?} col {col:?}"));
        }
    }

    for c in 0..n - 1 {
        for k in 0..n {
            if d.get(c + 1, (k + 1) % n) != d.get(c, k) {
                return Err(format!("shift relation fails at ({c},{k})"));
            }
        }
    }

    let plan = d.rearrangement().map_err(|e| e.to_string())?;
    let block = n / t;
    for p in 0..n {
        for s in 0..n {
            let rate = d.get(plan.perm_out[p], plan.perm_in[s]);
            let (q, r) = (p / block, s / block);
            if rate != pattern[(r + t - q) % t] || rate != plan.layout.rate(q, r) {
                return Err(format!("block ({q},{r}) not constant at ({p},{s})"));
            }
        }
    }
    for perm in [&plan.perm_in, &plan.perm_out] {
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err("not a permutation".into());
        }
        let inv = invert_permutation(perm);
        if (0..n).any(|i| perm[inv[i]] != i || inv[perm[i]] != i) {
            return Err("inverse permutation mismatch".into());
        }
        let x = Tensor4::randn([2, n, 3, 2], &mut psconv::tensor::Rng::new(n as u64), 1.0).unwrap();
        let back = unpermute_channels(&permute_channels(&x, perm).unwrap(), perm).unwrap();
        if back != x {
            return Err("channel permutation does not round-trip".into());
        }
    }
    Ok(())
}

/// A random archive of 0–6 tensors with mixed dtypes, ranks 0–4 and
/// arbitrary bit patterns (NaNs and infinities included) in f64 payloads.
pub fn random_archive(rng: &mut psconv::tensor::Rng) -> psconv::io::TensorArchive {
    use psconv::io::{DType, NamedTensor, TensorArchive};
    let mut archive = TensorArchive::new();
    let count = rng.below(7);
    for i in 0..count {
        let name_len = rng.below(12);
        let mut name: String = (0..name_len)
            .map(|_| *rng.choose(&['a', 'b', 'z', '.', '_', '0', 'é', '∂']))
            .collect();
        name.push_str(&i.to_string());
        let ndim = rng.below(5);
        let dims: Vec<usize> = (0..ndim).map(|_| rng.below(5)).collect();
        let len: usize = dims.iter().product();
        let dtype = if rng.below(2) == 0 { DType::F32 } else { DType::F64 };
        let data = (0..len)
            .map(|_| match dtype {
                DType::F64 => f64::from_bits(rng.next_u64()),
                // Only f32-representable values survive an f32 record.
                DType::F32 => f64::from(f32::from_bits(rng.next_u64() as u32)),
            })
            .collect();
        archive
            .push(NamedTensor { name, dtype, dims, data })
            .unwrap();
    }
    archive
}

/// Bitwise equality, so NaN payloads count.
pub fn archives_identical(a: &psconv::io::TensorArchive, b: &psconv::io::TensorArchive) -> bool {
    a.len() == b.len()
        && a.tensors().iter().zip(b.tensors()).all(|(x, y)| {
            x.name == y.name
                && x.dtype == y.dtype
                && x.dims == y.dims
                && x.data.len() == y.data.len()
                && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

/// Hand-assembled corrupt archives and the error code each must produce.
pub fn corruption_cases() -> Vec<(&'static str, Vec<u8>, u8)> {
    let header = |count: u32| {
        let mut b = b"PSTA".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&count.to_le_bytes());
        b
    };
    let record = |name: &[u8], dtype: u8, dims: &[u32], payload: usize| {
        let mut b = (name.len() as u16).to_le_bytes().to_vec();
        b.extend_from_slice(name);
        b.push(dtype);
        b.push(dims.len() as u8);
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend(std::iter::repeat_n(0u8, payload));
        b
    };
    let good = [header(1), record(b"w", 1, &[2], 16)].concat();

    let mut cases = vec![
        ("magic PSTB", [b"PSTB".as_slice(), &good[4..]].concat(), 1),
        ("short non-archive", b"XY".to_vec(), 1),
        ("version 2", [b"PSTA".as_slice(), &2u32.to_le_bytes(), &0u32.to_le_bytes()].concat(), 2),
        ("payload cut", good[..good.len() - 1].to_vec(), 3),
        ("header cut", good[..10].to_vec(), 3),
        ("count too high", [header(2), record(b"w", 1, &[2], 16)].concat(), 3),
        ("duplicate name", [header(2), record(b"w", 1, &[2], 16), record(b"w", 0, &[1], 4)].concat(), 4),
        ("dtype 2", [header(1), record(b"w", 2, &[2], 16)].concat(), 5),
        ("invalid utf-8", [header(1), record(&[0xff, 0xfe], 1, &[1], 8)].concat(), 6),
        ("trailing byte", [good.clone(), vec![0]].concat(), 7),
        ("huge payload", [header(1), record(b"w", 1, &[u32::MAX], 0)].concat(), 3),
        ("size overflows", [header(1), record(b"w", 1, &[u32::MAX; 3], 0)].concat(), 8),
    ];
    // Every strict prefix of a valid archive longer than the magic is a truncation.
    for cut in 4..good.len() {
        cases.push(("prefix", good[..cut].to_vec(), 3));
    }
    cases
}
