//! Offline invariant suite run by `rcut selftest`.
//!
//! Every property has a dotted name. Passing that name as the injected fault
//! corrupts the value the property inspects, which must make it fail; this is
//! how the suite itself is smoke-tested.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::protocol::{read_tokens, write_image, Response};
use crate::backend::server::serve;
use crate::backend::{Backend, BackendMeta, RefBackend, UniformBackend};
use crate::cut::{build_graph, ncut_partition, ncut_value, AffinityGraph, DEFAULT_PHI};
use crate::error::{Error, Result};
use crate::eval::{bbox_from_heatmap, iou, perturbation_curve, point_game, BBox, Order};
use crate::image::Image;
use crate::numerics::{cosine, generalized_residual, minmax_normalize, SymMatrix};
use crate::rout::{compute_weights, weight_tokens, ActivationMaps, ChannelWeights, ClassAwareTokens, TargetSpec};
use crate::tensor_file::{TensorEntry, TensorFile};
use crate::types::{GridMap, Heatmap, ProbVector, TokenMatrix};
use crate::vit::{Vit, VitConfig};

/// Every property name, grouped by suite.
pub const PROPERTIES: &[(&str, &[&str])] = &[
    ("numerics", &["numerics.cosine", "numerics.minmax", "numerics.eigen-residual", "numerics.k-orthogonality"]),
    ("partition", &["partition.planted-blocks", "partition.relaxation-bound", "partition.bridged-cliques"]),
    ("rout", &["rout.identity-law", "rout.columnwise-scaling"]),
    ("vit", &["vit.attention-rows", "vit.probabilities", "vit.determinism"]),
    ("metrics", &["metrics.iou", "metrics.point-game", "metrics.bbox", "metrics.perturbation-oracle"]),
    ("protocol", &["protocol.tensor-file", "protocol.round-trip"]),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    /// Names of properties that failed.
    pub failed: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelftestReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.failed.is_empty())
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.suites.iter().flat_map(|s| s.failed.iter().copied()).collect()
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    fault: Option<String>,
}

impl Ctx {
    fn tamper(&self, property: &str) -> bool {
        self.fault.as_deref() == Some(property)
    }
}

/// Runs every suite. `seed` varies only the fixtures; `fault` names one
/// property to sabotage.
pub fn run_selftest(seed: u64, fault: Option<&str>) -> Result<SelftestReport> {
    if let Some(f) = fault {
        if !PROPERTIES.iter().any(|(_, props)| props.contains(&f)) {
            return Err(Error::Config(format!("unknown fault '{f}'")));
        }
    }
    let mut ctx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        fault: fault.map(str::to_owned),
    };
    let mut suites = Vec::new();
    for (suite, props) in PROPERTIES {
        let mut result = SuiteResult {
            name: suite,
            passed: 0,
            failed: Vec::new(),
        };
        for &prop in *props {
            let ok = match check(&mut ctx, prop) {
                Ok(ok) => ok,
                Err(e) => {
                    log::warn!("{prop}: {e}");
                    false
                }
            };
            if ok {
                result.passed += 1;
            } else {
                result.failed.push(prop);
            }
        }
        suites.push(result);
    }
    Ok(SelftestReport { seed, suites })
}

fn check(ctx: &mut Ctx, prop: &str) -> Result<bool> {
    match prop {
        "numerics.cosine" => {
            let mut c = cosine(&[0.8f64, 0.2], &[0.2, 0.8]);
            if ctx.tamper(prop) {
                c += 1e-3;
            }
            Ok((c - 0.32 / 0.68).abs() < 1e-12)
        }
        "numerics.minmax" => {
            let mut m = minmax_normalize(&[2.0, 4.0, 6.0, 8.0]);
            if ctx.tamper(prop) {
                m[1] = 0.5;
            }
            let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
            Ok(m.iter().zip(expect).all(|(a, b)| (f64::from(*a) - b).abs() < 1e-6)
                && minmax_normalize(&[5.0; 3]) == vec![0.0; 3])
        }
        "numerics.eigen-residual" | "numerics.k-orthogonality" => {
            for _ in 0..50 {
                let n = ctx.rng.random_range(2..=30);
                let g = random_connected(&mut ctx.rng, n);
                let mut p = ncut_partition(&g)?;
                if ctx.tamper(prop) {
                    p.y1[0] += 1e-3;
                }
                let ok = if prop == "numerics.eigen-residual" {
                    generalized_residual(&g.degrees, &g.adjacency, p.lambda1, &p.y1) <= 1e-6
                } else {
                    let total: f64 = g.degrees.iter().sum();
                    let dot: f64 = p.y1.iter().zip(&g.degrees).map(|(y, k)| y * k).sum();
                    dot.abs() <= 1e-6 * total
                };
                if !ok {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        "partition.planted-blocks" => {
            for _ in 0..10 {
                let s = ctx.rng.random_range(4..=24);
                // at least two tokens per cluster, otherwise a lone token is isolated
                let in_a: Vec<bool> = (0..s).map(|i| if i < 4 { i % 2 == 0 } else { ctx.rng.random_bool(0.5) }).collect();
                let d = 6;
                let mut data = Vec::with_capacity(s * d);
                for &a in &in_a {
                    let scale = if a { 3.0 } else { 1.0 } * ctx.rng.random_range(0.5f32..2.0);
                    data.extend((0..d).map(|c| if (c < d / 2) == a { scale } else { 0.0 }));
                }
                let tc = ClassAwareTokens::unweighted(&TokenMatrix::new(s, d, data, false)?)?;
                let g = build_graph(&tc, DEFAULT_PHI)?;
                let mut fg = ncut_partition(&g)?.foreground_tokens(&g);
                if ctx.tamper(prop) {
                    fg.pop();
                }
                let expect: Vec<usize> = (0..s).filter(|&i| in_a[i]).collect();
                if fg != expect {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        "partition.relaxation-bound" => {
            for _ in 0..30 {
                let n = ctx.rng.random_range(2..=9);
                let g = random_connected(&mut ctx.rng, n);
                let p = ncut_partition(&g)?;
                let mut got = ncut_value(&g, &p.membership())?;
                if ctx.tamper(prop) {
                    got = -1.0;
                }
                if got < brute_force_min(&g)? - 1e-12 {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        "partition.bridged-cliques" => {
            for _ in 0..10 {
                let a = ctx.rng.random_range(2..=5);
                let b = ctx.rng.random_range(2..=5);
                let n = a + b;
                let mut e = SymMatrix::identity(n);
                e.set(a - 1, a, 1.0);
                for (lo, hi) in [(0, a), (a, n)] {
                    for i in lo..hi {
                        for j in i + 1..hi {
                            e.set(i, j, 1.0);
                        }
                    }
                }
                let g = AffinityGraph::from_adjacency(e)?;
                let mut m = ncut_partition(&g)?.membership();
                if ctx.tamper(prop) {
                    m[0] = !m[0];
                }
                if (ncut_value(&g, &m)? - brute_force_min(&g)?).abs() > 1e-12 {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        "rout.identity-law" => {
            let vit = Vit::init_random(VitConfig::desk(), ctx.rng.random())?;
            let b = RefBackend::new(vit);
            for _ in 0..3 {
                let x = random_image(&mut ctx.rng, 32);
                let maps = ActivationMaps {
                    maps: vec![GridMap::filled(4, 4, 1.0); 2],
                };
                let mut w = compute_weights(&b, &x, &maps, TargetSpec::FullOutput, 1)?;
                if ctx.tamper(prop) {
                    w.0[0] -= 1e-3;
                }
                if w.0.iter().any(|&v| (v - 1.0).abs() > 1e-6) {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        "rout.columnwise-scaling" => {
            let t = TokenMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)?;
            let mut tc = weight_tokens(&t, &ChannelWeights(vec![0.5, 2.0, -1.0]))?.tokens().data().to_vec();
            if ctx.tamper(prop) {
                tc.swap(0, 1);
            }
            Ok(tc == [0.5, 4.0, -3.0, 2.0, 10.0, -6.0])
        }
        "vit.attention-rows" | "vit.probabilities" | "vit.determinism" => {
            for _ in 0..4 {
                let seed: u64 = ctx.rng.random();
                let x = random_image(&mut ctx.rng, 32);
                let vit = Vit::init_random(VitConfig::desk(), seed)?;
                let mut t = vit.forward(&x)?;
                let ok = match prop {
                    "vit.attention-rows" => {
                        if ctx.tamper(prop) {
                            t.attentions[0] += 1e-3;
                        }
                        t.attentions
                            .chunks_exact(t.tokens)
                            .all(|row| (row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() <= 1e-5)
                    }
                    "vit.probabilities" => {
                        let mut p = t.probs.as_slice().to_vec();
                        if ctx.tamper(prop) {
                            p[0] += 1e-3;
                        }
                        (p.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() <= 1e-5
                    }
                    _ => {
                        let mut again = Vit::init_random(VitConfig::desk(), seed)?.forward(&x)?;
                        if ctx.tamper(prop) {
                            again.final_tokens.data_mut()[0] += 1e-3;
                        }
                        bits(t.probs.as_slice()) == bits(again.probs.as_slice())
                            && bits(t.final_tokens.data()) == bits(again.final_tokens.data())
                            && bits(&t.attentions) == bits(&again.attentions)
                    }
                };
                if !ok {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        "metrics.iou" => {
            let a = BBox::new(0, 0, 10, 10)?;
            let mut third = iou(&a, &BBox::new(0, 5, 10, 15)?);
            if ctx.tamper(prop) {
                third = 0.3;
            }
            Ok(iou(&a, &a) == 1.0 && iou(&a, &BBox::new(20, 20, 30, 30)?) == 0.0 && third == 50.0 / 150.0)
        }
        "metrics.point-game" => {
            let b = [BBox::new(5, 5, 15, 15)?];
            let mut tie = one_hot_heat(20, &[(0, 0), (10, 10)]);
            if ctx.tamper(prop) {
                tie.data[0] = 0.0;
            }
            Ok(point_game(&one_hot_heat(20, &[(10, 10)]), &b)?
                && !point_game(&one_hot_heat(20, &[(0, 0)]), &b)?
                && !point_game(&tie, &b)?)
        }
        "metrics.bbox" => {
            let mut hull = bbox_from_heatmap(&one_hot_heat(12, &[(2, 2), (9, 5)]), 0.2);
            if ctx.tamper(prop) {
                hull.x1 += 1;
            }
            Ok(bbox_from_heatmap(&one_hot_heat(10, &[(3, 7)]), 0.2) == BBox::new(7, 3, 8, 4)?
                && bbox_from_heatmap(&one_hot_heat(10, &[]), 0.2) == BBox::EMPTY
                && hull == BBox::new(2, 2, 6, 10)?)
        }
        "metrics.perturbation-oracle" => {
            let size = 10;
            let n = size * size;
            let r = 10;
            let mut cells: Vec<usize> = (0..n).collect();
            for i in 0..r {
                let j = ctx.rng.random_range(i..n);
                cells.swap(i, j);
            }
            let region = cells[..r].to_vec();
            let mut heat = vec![0.0; n];
            for &i in &region {
                heat[i] = 1.0;
            }
            let b = RegionFraction { size, region };
            let x = Image::filled(size, size, 0.5);
            let h = Heatmap::new(size, size, heat)?;
            let mut most = perturbation_curve(&b, &x, &h, 0, Order::MostFirst, 1)?.mean;
            let least = perturbation_curve(&b, &x, &h, 0, Order::LeastFirst, 1)?.mean;
            if ctx.tamper(prop) {
                most -= 0.1;
            }
            Ok((most - 1.0).abs() < 1e-9 && least.abs() < 1e-9)
        }
        "protocol.tensor-file" => {
            let data: Vec<f32> = (0..60).map(|_| f32::from_bits(ctx.rng.random::<u32>() & 0x7f7f_ffff)).collect();
            let tf = TensorFile::from_entries(vec![
                TensorEntry::new("a", vec![3, 4, 5], data)?,
                TensorEntry::new("empty", vec![0], vec![])?,
            ])?;
            let mut bytes = tf.to_bytes()?;
            let back = TensorFile::from_bytes(&bytes)?;
            if ctx.tamper(prop) {
                let last = bytes.len() - 1;
                bytes[last] ^= 1;
            }
            Ok(back.to_bytes()? == bytes && bits(&back.entries()[0].data) == bits(&tf.entries()[0].data))
        }
        "protocol.round-trip" => protocol_round_trip(ctx, prop),
        _ => Err(Error::Config(format!("no check named '{prop}'"))),
    }
}

fn protocol_round_trip(ctx: &mut Ctx, prop: &str) -> Result<bool> {
    let meta = BackendMeta {
        image_size: 8,
        patch: 4,
        dim: 3,
        classes: 5,
    };
    let value: f32 = ctx.rng.random_range(-2.0..2.0);
    let stub = UniformBackend::new(meta, value);
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let req = dir.path().join("req.rcut");
    let x = random_image(&mut ctx.rng, 8);
    write_image(&req, &x)?;
    let p = req.display();
    let input = format!(
        "{{\"id\":1,\"op\":\"meta\"}}\n{{\"id\":2,\"op\":\"forward\",\"tensor\":\"{p}\"}}\n{{\"id\":3,\"op\":\"tokens\",\"tensor\":\"{p}\"}}\n"
    );
    let mut out = Vec::new();
    serve(&stub, input.as_bytes(), &mut out)?;
    let replies: Vec<Response> = out
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io("<reply>", e))?;
            serde_json::from_str(&l).map_err(|e| Error::format(None, e.to_string()))
        })
        .collect::<Result<_>>()?;
    if replies.len() != 3 {
        return Ok(false);
    }
    let mut tokens = read_tokens(std::path::Path::new(replies[2].tensor.as_deref().unwrap_or("")))?;
    if ctx.tamper(prop) {
        tokens.data_mut()[0] = -value - 1.0;
    }
    let probs = replies[1].probs.clone().unwrap_or_default();
    Ok(replies[0].to_meta()? == meta
        && bits(&probs) == bits(stub.forward(&x)?.as_slice())
        && bits(tokens.data()) == bits(stub.tokens(&x)?.data()))
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    Image::from_fn(size, size, |_, _, _| rng.random_range(0.0..=1.0))
}

fn one_hot_heat(size: usize, hot: &[(usize, usize)]) -> Heatmap {
    let mut data = vec![0.0; size * size];
    for &(r, c) in hot {
        data[r * size + c] = 1.0;
    }
    Heatmap {
        height: size,
        width: size,
        data,
    }
}

/// Connected graph with self-edges, edge probability 1/2.
pub fn random_connected(rng: &mut ChaCha8Rng, n: usize) -> AffinityGraph {
    loop {
        let mut e = SymMatrix::identity(n);
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.5) {
                    e.set(a, b, 1.0);
                }
            }
        }
        if is_connected(&e) {
            return AffinityGraph::from_adjacency(e).expect("0/1 adjacency");
        }
    }
}

fn is_connected(e: &SymMatrix) -> bool {
    let n = e.order();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(a) = stack.pop() {
        for b in 0..n {
            if !seen[b] && e.get(a, b) != 0.0 {
                seen[b] = true;
                stack.push(b);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Smallest Ncut over every bipartition.
pub fn brute_force_min(g: &AffinityGraph) -> Result<f64> {
    let n = g.len();
    let mut best = f64::INFINITY;
    for mask in 1u64..(1 << (n - 1)) {
        let m: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        best = best.min(ncut_value(g, &m)?);
    }
    Ok(best)
}

/// `p_0` is the fraction of region pixels left unmasked.
struct RegionFraction {
    size: usize,
    region: Vec<usize>,
}

impl Backend for RegionFraction {
    fn meta(&self) -> BackendMeta {
        BackendMeta {
            image_size: self.size,
            patch: 1,
            dim: 1,
            classes: 2,
        }
    }

    fn forward(&self, x: &Image) -> Result<ProbVector> {
        let d = x.data();
        let alive = self
            .region
            .iter()
            .filter(|&&i| d[i * 3..i * 3 + 3].iter().any(|&v| v != 0.0))
            .count();
        let p = alive as f32 / self.region.len() as f32;
        ProbVector::new(vec![p, 1.0 - p])
    }

    fn tokens(&self, _: &Image) -> Result<TokenMatrix> {
        Err(Error::Unsupported("region oracle has no tokens".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_for_several_seeds() {
        for seed in [0, 1, 7, 99, 12345] {
            let r = run_selftest(seed, None).unwrap();
            assert!(r.all_passed(), "seed {seed}: {:?}", r.failures());
            assert_eq!(r.suites.len(), PROPERTIES.len());
        }
    }

    #[test]
    fn every_fault_is_detected_by_name() {
        for (_, props) in PROPERTIES {
            for &p in *props {
                let r = run_selftest(1, Some(p)).unwrap();
                assert_eq!(r.failures(), vec![p]);
            }
        }
        assert!(run_selftest(1, Some("nope")).is_err());
    }
}
