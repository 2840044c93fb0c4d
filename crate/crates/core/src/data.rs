//! Dataset ingestion and validation, the synthetic planted-operator
//! generator, and checkpoint I/O.
//!
//! All file formats are plain text. Floats are printed with 17 significant
//! digits so that save/load round-trips are bitwise lossless.
//!
//! Dataset directory layout:
//! - `pairs.txt` — `attr_name obj_name {seen|unseen}` per line
//! - `train_features.txt`, `test_features.txt` — line 1 `N F`, then
//!   `image_id attr_name obj_name f1 ... fF` per line
//! - `antonyms.txt` (optional) — `attr_name attr_name` per line
//! - `object_vectors.txt` (optional) — `obj_name v1 ... vD` per line

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{lu_invert, matvec, Matrix, Vector};
use crate::losses::AntonymList;
use crate::model::{
    AttributeBank, AuxHeads, ImageEmbedder, ModelParams, ObjectTable, PairId, Vocab,
};

pub const CHECKPOINT_MAGIC: &str = "AOCKPT1";

/// One labeled image: an id, its precomputed feature vector, and its pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub feat: Vector,
    pub pair: PairId,
}

/// A fully validated dataset: features, the seen/unseen pair partition,
/// and the optional antonym list and object word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub vocab: Vocab,
    pub feat_dim: usize,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub seen_pairs: Vec<PairId>,
    pub unseen_pairs: Vec<PairId>,
    pub antonyms: Option<AntonymList>,
    pub object_vectors: Option<HashMap<String, Vector>>,
}

impl DatasetBundle {
    /// Check every structural invariant. Load paths report violations with
    /// file/line context; this is the context-free backstop.
    pub fn validate(&self) -> Result<()> {
        let seen: HashSet<PairId> = self.seen_pairs.iter().copied().collect();
        let unseen: HashSet<PairId> = self.unseen_pairs.iter().copied().collect();
        if seen.len() != self.seen_pairs.len() || unseen.len() != self.unseen_pairs.len() {
            return Err(Error::validation("duplicate pairs in split"));
        }
        if seen.intersection(&unseen).next().is_some() {
            return Err(Error::validation("seen and unseen pair sets overlap"));
        }
        if self.seen_pairs.len() < 2 {
            return Err(Error::validation(
                "need at least 2 seen pairs for negative sampling",
            ));
        }
        for inst in &self.train {
            if !seen.contains(&inst.pair) {
                return Err(Error::validation(format!(
                    "training instance '{}' labeled with a pair outside the seen split",
                    inst.id
                )));
            }
        }
        for inst in &self.test {
            if !unseen.contains(&inst.pair) {
                return Err(Error::validation(format!(
                    "test instance '{}' labeled with a pair outside the unseen split",
                    inst.id
                )));
            }
        }
        for (a, name) in self.vocab.attributes.iter().enumerate() {
            if !self.seen_pairs.iter().any(|p| p.attr == a) {
                return Err(Error::validation(format!(
                    "attribute '{name}' never appears in a seen pair"
                )));
            }
        }
        for (o, name) in self.vocab.objects.iter().enumerate() {
            if !self.seen_pairs.iter().any(|p| p.obj == o) {
                return Err(Error::validation(format!(
                    "object '{name}' never appears in a seen pair"
                )));
            }
        }
        for inst in self.train.iter().chain(&self.test) {
            if inst.feat.len() != self.feat_dim {
                return Err(Error::validation(format!(
                    "instance '{}' has feature length {}, expected {}",
                    inst.id,
                    inst.feat.len(),
                    self.feat_dim
                )));
            }
            if !inst.feat.is_finite() {
                return Err(Error::NonFinite(format!("feature of instance '{}'", inst.id)));
            }
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line_no: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::parse(path, line_no, format!("invalid number '{tok}'")))
}

/// Parse `pairs.txt`, building the vocab in order of first appearance.
fn load_pairs(path: &Path) -> Result<(Vocab, Vec<PairId>, Vec<PairId>)> {
    let text = read_file(path)?;
    let mut attrs: Vec<String> = Vec::new();
    let mut objs: Vec<String> = Vec::new();
    let mut rows: Vec<(usize, usize, bool, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 'attr obj seen|unseen', got {} tokens", toks.len()),
            ));
        }
        let attr = match attrs.iter().position(|a| a == toks[0]) {
            Some(i) => i,
            None => {
                attrs.push(toks[0].to_string());
                attrs.len() - 1
            }
        };
        let obj = match objs.iter().position(|o| o == toks[1]) {
            Some(i) => i,
            None => {
                objs.push(toks[1].to_string());
                objs.len() - 1
            }
        };
        let seen = match toks[2] {
            "seen" => true,
            "unseen" => false,
            other => {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("split must be 'seen' or 'unseen', got '{other}'"),
                ))
            }
        };
        rows.push((attr, obj, seen, line_no));
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 1, "no pairs"));
    }
    let vocab = Vocab::new(attrs, objs)?;
    let mut dedup = HashSet::new();
    let mut seen_pairs = Vec::new();
    let mut unseen_pairs = Vec::new();
    for (attr, obj, seen, line_no) in rows {
        let pair = PairId { attr, obj };
        if !dedup.insert(pair) {
            return Err(Error::parse(path, line_no, "duplicate pair"));
        }
        if seen {
            seen_pairs.push(pair);
        } else {
            unseen_pairs.push(pair);
        }
    }
    Ok((vocab, seen_pairs, unseen_pairs))
}

/// Parse a features file against an existing vocab.
fn load_features(path: &Path, vocab: &Vocab) -> Result<(usize, Vec<Instance>)> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty features file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(Error::parse(path, 1, "header must be 'N F'"));
    }
    let n: usize = toks[0]
        .parse()
        .map_err(|_| Error::parse(path, 1, "invalid instance count"))?;
    let f: usize = toks[1]
        .parse()
        .map_err(|_| Error::parse(path, 1, "invalid feature dimension"))?;
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 + f {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected id, attr, obj and {f} values, got {} tokens", toks.len()),
            ));
        }
        let attr = vocab.attr_index(toks[1]).ok_or_else(|| {
            Error::parse(path, line_no, format!("unknown attribute '{}'", toks[1]))
        })?;
        let obj = vocab
            .obj_index(toks[2])
            .ok_or_else(|| Error::parse(path, line_no, format!("unknown object '{}'", toks[2])))?;
        let mut feat = Vec::with_capacity(f);
        for tok in &toks[3..] {
            feat.push(parse_f64(path, line_no, tok)?);
        }
        out.push(Instance {
            id: toks[0].to_string(),
            feat: Vector::new(feat),
            pair: PairId { attr, obj },
        });
    }
    if out.len() != n {
        return Err(Error::parse(
            path,
            1,
            format!("header promises {n} instances, found {}", out.len()),
        ));
    }
    Ok((f, out))
}

/// Parse an antonym file (`attr_name attr_name` per line) against a vocab.
pub fn load_antonyms(path: &Path, vocab: &Vocab) -> Result<AntonymList> {
    let text = read_file(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::parse(path, line_no, "expected two attribute names"));
        }
        let a = vocab.attr_index(toks[0]).ok_or_else(|| {
            Error::parse(path, line_no, format!("unknown attribute '{}'", toks[0]))
        })?;
        let b = vocab.attr_index(toks[1]).ok_or_else(|| {
            Error::parse(path, line_no, format!("unknown attribute '{}'", toks[1]))
        })?;
        if a == b {
            return Err(Error::parse(path, line_no, "attribute paired with itself"));
        }
        pairs.push((a, b));
    }
    AntonymList::new(pairs, vocab.num_attrs())
}

/// Parse object word vectors (`obj_name v1 ... vD` per line).
pub fn load_object_vectors(path: &Path) -> Result<HashMap<String, Vector>> {
    let text = read_file(path)?;
    let mut out = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 2 {
            return Err(Error::parse(path, line_no, "expected name and values"));
        }
        let vals: Result<Vec<f64>> = toks[1..]
            .iter()
            .map(|t| parse_f64(path, line_no, t))
            .collect();
        let v = Vector::new(vals?);
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("inconsistent vector length {} (expected {d})", v.len()),
                ))
            }
            _ => {}
        }
        if out.insert(toks[0].to_string(), v).is_some() {
            return Err(Error::parse(
                path,
                line_no,
                format!("duplicate object '{}'", toks[0]),
            ));
        }
    }
    Ok(out)
}

/// Load and validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let (vocab, seen_pairs, unseen_pairs) = load_pairs(&dir.join("pairs.txt"))?;
    let (f_train, train) = load_features(&dir.join("train_features.txt"), &vocab)?;
    let (f_test, test) = load_features(&dir.join("test_features.txt"), &vocab)?;
    if f_train != f_test {
        return Err(Error::validation(format!(
            "train features have dimension {f_train} but test features {f_test}"
        )));
    }

    let antonyms_path = dir.join("antonyms.txt");
    let antonyms = if antonyms_path.exists() {
        Some(load_antonyms(&antonyms_path, &vocab)?)
    } else {
        None
    };
    let vectors_path = dir.join("object_vectors.txt");
    let object_vectors = if vectors_path.exists() {
        Some(load_object_vectors(&vectors_path)?)
    } else {
        None
    };

    // re-check instance labels with file context before the backstop
    let seen: HashSet<PairId> = seen_pairs.iter().copied().collect();
    for (idx, inst) in train.iter().enumerate() {
        if !seen.contains(&inst.pair) {
            return Err(Error::parse(
                dir.join("train_features.txt"),
                idx + 2,
                format!("training instance '{}' labeled with a non-seen pair", inst.id),
            ));
        }
    }

    let bundle = DatasetBundle {
        vocab,
        feat_dim: f_train,
        train,
        test,
        seen_pairs,
        unseen_pairs,
        antonyms,
        object_vectors,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn fmt_floats(out: &mut String, vals: &[f64]) {
    for v in vals {
        let _ = write!(out, " {:.16e}", v);
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn features_to_string(instances: &[Instance], feat_dim: usize, vocab: &Vocab) -> String {
    let mut out = format!("{} {}\n", instances.len(), feat_dim);
    for inst in instances {
        out.push_str(&inst.id);
        out.push(' ');
        out.push_str(&vocab.attributes[inst.pair.attr]);
        out.push(' ');
        out.push_str(&vocab.objects[inst.pair.obj]);
        fmt_floats(&mut out, &inst.feat.data);
        out.push('\n');
    }
    out
}

/// Write a bundle back out in the directory layout `load_dataset` reads.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    // write in (attr, obj) order so reloading reconstructs the same vocab
    // order via first appearance whenever the split covers the full grid
    let mut tagged: Vec<(PairId, &str)> = bundle
        .seen_pairs
        .iter()
        .map(|&p| (p, "seen"))
        .chain(bundle.unseen_pairs.iter().map(|&p| (p, "unseen")))
        .collect();
    tagged.sort();
    let mut pairs = String::new();
    for (p, split) in tagged {
        let _ = writeln!(
            pairs,
            "{} {} {}",
            bundle.vocab.attributes[p.attr], bundle.vocab.objects[p.obj], split
        );
    }
    write_file(&dir.join("pairs.txt"), &pairs)?;
    write_file(
        &dir.join("train_features.txt"),
        &features_to_string(&bundle.train, bundle.feat_dim, &bundle.vocab),
    )?;
    write_file(
        &dir.join("test_features.txt"),
        &features_to_string(&bundle.test, bundle.feat_dim, &bundle.vocab),
    )?;
    if let Some(ant) = &bundle.antonyms {
        let mut out = String::new();
        for &(a, b) in &ant.pairs {
            let _ = writeln!(
                out,
                "{} {}",
                bundle.vocab.attributes[a], bundle.vocab.attributes[b]
            );
        }
        write_file(&dir.join("antonyms.txt"), &out)?;
    }
    if let Some(vecs) = &bundle.object_vectors {
        let mut out = String::new();
        // stable order: vocab order first, then extras alphabetically
        let mut names: Vec<&String> = vecs.keys().collect();
        names.sort_by_key(|n| {
            (
                bundle.vocab.obj_index(n).unwrap_or(usize::MAX),
                (*n).clone(),
            )
        });
        for name in names {
            out.push_str(name);
            fmt_floats(&mut out, &vecs[name].data);
            out.push('\n');
        }
        write_file(&dir.join("object_vectors.txt"), &out)?;
    }
    Ok(())
}

/// Parameters of the planted-model generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_attrs: usize,
    pub num_objs: usize,
    pub dim: usize,
    pub images_per_pair: usize,
    pub unseen_fraction: f64,
    pub noise_sigma: f64,
    pub operator_perturbation: f64,
    pub misspecified: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_attrs: 10,
            num_objs: 15,
            dim: 12,
            images_per_pair: 50,
            unseen_fraction: 0.2,
            noise_sigma: 0.0,
            operator_perturbation: 0.2,
            misspecified: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_attrs < 2 || self.num_objs < 1 || self.dim < 1 || self.images_per_pair < 1 {
            return Err(Error::validation(
                "synthetic spec needs >=2 attributes, >=1 object, dim >= 1, images >= 1",
            ));
        }
        if !(self.unseen_fraction > 0.0 && self.unseen_fraction < 1.0) {
            return Err(Error::validation("unseen fraction must be in (0, 1)"));
        }
        if self.noise_sigma < 0.0 || self.operator_perturbation < 0.0 {
            return Err(Error::validation("noise and perturbation must be >= 0"));
        }
        Ok(())
    }
}

/// Ground-truth prototypes and operators the generator planted.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub objects: ObjectTable,
    pub operators: AttributeBank,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn frobenius(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Generate a planted-model dataset: unit-norm Gaussian object prototypes,
/// operators I + perturbation·G kept well conditioned by resampling, a
/// uniformly random seen/unseen partition satisfying the bundle invariants,
/// and `images_per_pair` noisy features per pair (seen pairs feed the train
/// split, unseen pairs the test split). Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DatasetBundle, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;

    let vocab = Vocab::new(
        (0..spec.num_attrs).map(|i| format!("attr{i}")).collect(),
        (0..spec.num_objs).map(|i| format!("obj{i}")).collect(),
    )?;

    // unit-norm Gaussian prototypes
    let mut prototypes = Vec::with_capacity(spec.num_objs);
    for _ in 0..spec.num_objs {
        let mut v = Vector::new((0..d).map(|_| gaussian(&mut rng, 1.0)).collect());
        let n = v.norm().max(1e-12);
        v = v.scale(1.0 / n);
        prototypes.push(v);
    }

    // operators I + p G, resampled until the Frobenius condition proxy
    // ||M||_F ||M^-1||_F (an upper bound on the 2-norm condition number)
    // stays under 1e3
    let mut operators = Vec::with_capacity(spec.num_attrs);
    for _ in 0..spec.num_attrs {
        let op = loop {
            let mut m = Matrix::identity(d);
            for x in m.data.iter_mut() {
                *x += spec.operator_perturbation * gaussian(&mut rng, 1.0);
            }
            if let Ok(inv) = lu_invert(&m) {
                if frobenius(&m) * frobenius(&inv) <= 1e3 {
                    break m;
                }
            }
        };
        operators.push(op);
    }

    // seen/unseen partition with every attribute and object seen somewhere
    let all_pairs = vocab.all_pairs();
    let n_unseen = ((all_pairs.len() as f64) * spec.unseen_fraction).round() as usize;
    let n_unseen = n_unseen.clamp(1, all_pairs.len() - 2);
    let mut partition = None;
    for _ in 0..1000 {
        let mut shuffled = all_pairs.clone();
        shuffled.shuffle(&mut rng);
        let (unseen, seen) = shuffled.split_at(n_unseen);
        let ok = (0..spec.num_attrs).all(|a| seen.iter().any(|p| p.attr == a))
            && (0..spec.num_objs).all(|o| seen.iter().any(|p| p.obj == o));
        if ok {
            let mut seen = seen.to_vec();
            let mut unseen = unseen.to_vec();
            seen.sort();
            unseen.sort();
            partition = Some((seen, unseen));
            break;
        }
    }
    let (seen_pairs, unseen_pairs) = partition.ok_or_else(|| {
        Error::validation("could not find a valid seen/unseen partition in 1000 attempts")
    })?;

    // optional fixed random nonlinearity for misspecification studies
    let misspec_proj = if spec.misspecified {
        let mut r = Matrix::zeros(d, d);
        for x in r.data.iter_mut() {
            *x = gaussian(&mut rng, 1.0 / (d as f64).sqrt());
        }
        Some(r)
    } else {
        None
    };

    let emit = |pairs: &[PairId], split: &str, rng: &mut ChaCha8Rng| -> Vec<Instance> {
        let mut out = Vec::with_capacity(pairs.len() * spec.images_per_pair);
        for &pair in pairs {
            let clean = matvec(&operators[pair.attr], &prototypes[pair.obj]);
            for k in 0..spec.images_per_pair {
                let mut feat = clean.clone();
                if let Some(r) = &misspec_proj {
                    let warped = matvec(r, &clean);
                    for (f, w) in feat.data.iter_mut().zip(&warped.data) {
                        *f += 0.1 * w.tanh();
                    }
                }
                for f in feat.data.iter_mut() {
                    *f += gaussian(rng, spec.noise_sigma);
                }
                out.push(Instance {
                    id: format!(
                        "{split}_{}_{}_{k}",
                        vocab.attributes[pair.attr], vocab.objects[pair.obj]
                    ),
                    feat,
                    pair,
                });
            }
        }
        out
    };

    let train = emit(&seen_pairs, "tr", &mut rng);
    let test = emit(&unseen_pairs, "te", &mut rng);

    let object_vectors: HashMap<String, Vector> = vocab
        .objects
        .iter()
        .cloned()
        .zip(prototypes.iter().cloned())
        .collect();

    let bundle = DatasetBundle {
        vocab: vocab.clone(),
        feat_dim: d,
        train,
        test,
        seen_pairs,
        unseen_pairs,
        antonyms: None,
        object_vectors: Some(object_vectors),
    };
    bundle.validate()?;

    Ok((
        bundle,
        GroundTruth {
            objects: ObjectTable {
                vectors: prototypes,
            },
            operators: AttributeBank { operators },
        },
    ))
}

/// Write the planted operators alongside a generated dataset so recovery
/// diagnostics can compare against them.
pub fn save_ground_truth(vocab: &Vocab, truth: &GroundTruth, dir: &Path) -> Result<()> {
    let mut out = String::new();
    for (name, op) in vocab.attributes.iter().zip(&truth.operators.operators) {
        out.push_str(name);
        fmt_floats(&mut out, &op.data);
        out.push('\n');
    }
    write_file(&dir.join("truth_operators.txt"), &out)
}

/// Serialize parameters to the `AOCKPT1` text checkpoint format.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(
        out,
        "{} {} {} {}",
        params.dim,
        params.feat_dim,
        params.vocab.num_attrs(),
        params.vocab.num_objs()
    );
    let _ = writeln!(out, "{}", params.vocab.attributes.join(" "));
    let _ = writeln!(out, "{}", params.vocab.objects.join(" "));
    for v in &params.objects.vectors {
        fmt_floats(&mut out, &v.data);
        out.push('\n');
    }
    for m in &params.attrs.operators {
        fmt_floats(&mut out, &m.data);
        out.push('\n');
    }
    for block in [
        &params.embedder.weight.data,
        &params.embedder.bias.data,
        &params.aux.attr_weight.data,
        &params.aux.attr_bias.data,
        &params.aux.obj_weight.data,
        &params.aux.obj_bias.data,
    ] {
        fmt_floats(&mut out, block);
        out.push('\n');
    }
    write_file(path, &out)
}

fn parse_row(path: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != expect {
        return Err(Error::parse(
            path,
            line_no,
            format!("expected {expect} values, got {}", toks.len()),
        ));
    }
    toks.iter().map(|t| parse_f64(path, line_no, t)).collect()
}

/// Load an `AOCKPT1` checkpoint. Truncation, header/body disagreement, and
/// malformed numbers are all hard errors; nothing partial is returned.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, format!("truncated checkpoint: missing {what}")))
    };

    let (_, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(Error::parse(
            path,
            1,
            format!("bad header '{}', expected '{CHECKPOINT_MAGIC}'", magic.trim()),
        ));
    }
    let (i, dims) = next("dimensions")?;
    let toks: Vec<&str> = dims.split_whitespace().collect();
    if toks.len() != 4 {
        return Err(Error::parse(path, i + 1, "expected 'D F |A| |O|'"));
    }
    let parse_dim = |t: &str| -> Result<usize> {
        t.parse()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid dimension '{t}'")))
    };
    let d = parse_dim(toks[0])?;
    let f = parse_dim(toks[1])?;
    let na = parse_dim(toks[2])?;
    let no = parse_dim(toks[3])?;

    let (i, attr_line) = next("attribute names")?;
    let attributes: Vec<String> = attr_line.split_whitespace().map(String::from).collect();
    if attributes.len() != na {
        return Err(Error::parse(
            path,
            i + 1,
            format!("expected {na} attribute names, got {}", attributes.len()),
        ));
    }
    let (i, obj_line) = next("object names")?;
    let objects: Vec<String> = obj_line.split_whitespace().map(String::from).collect();
    if objects.len() != no {
        return Err(Error::parse(
            path,
            i + 1,
            format!("expected {no} object names, got {}", objects.len()),
        ));
    }
    let vocab = Vocab::new(attributes, objects)?;

    let mut vectors = Vec::with_capacity(no);
    for _ in 0..no {
        let (i, line) = next("object vector")?;
        vectors.push(Vector::new(parse_row(path, i + 1, line, d)?));
    }
    let mut operators = Vec::with_capacity(na);
    for _ in 0..na {
        let (i, line) = next("attribute operator")?;
        operators.push(Matrix::new(d, d, parse_row(path, i + 1, line, d * d)?));
    }
    let (i, line) = next("embedder weight")?;
    let emb_weight = Matrix::new(d, f, parse_row(path, i + 1, line, d * f)?);
    let (i, line) = next("embedder bias")?;
    let emb_bias = Vector::new(parse_row(path, i + 1, line, d)?);
    let (i, line) = next("attribute head weight")?;
    let attr_weight = Matrix::new(na, d, parse_row(path, i + 1, line, na * d)?);
    let (i, line) = next("attribute head bias")?;
    let attr_bias = Vector::new(parse_row(path, i + 1, line, na)?);
    let (i, line) = next("object head weight")?;
    let obj_weight = Matrix::new(no, d, parse_row(path, i + 1, line, no * d)?);
    let (i, line) = next("object head bias")?;
    let obj_bias = Vector::new(parse_row(path, i + 1, line, no)?);

    Ok(ModelParams {
        vocab,
        objects: ObjectTable { vectors },
        attrs: AttributeBank { operators },
        embedder: ImageEmbedder {
            weight: emb_weight,
            bias: emb_bias,
        },
        aux: AuxHeads {
            attr_weight,
            attr_bias,
            obj_weight,
            obj_bias,
        },
        dim: d,
        feat_dim: f,
    })
}

/// Parse a single free-standing vector file: one line, `v1 ... vD`.
pub fn load_vector_file(path: &Path) -> Result<Vector> {
    let text = read_file(path)?;
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.is_empty() {
        return Err(Error::parse(path, 1, "empty vector file"));
    }
    let vals: Result<Vec<f64>> = toks.iter().map(|t| parse_f64(path, 1, t)).collect();
    Ok(Vector::new(vals?))
}

/// Parse a retrieval pool file: line 1 `N F`, then `id f1 ... fF`.
pub fn load_pool(path: &Path) -> Result<Vec<(String, Vector)>> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty pool file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(Error::parse(path, 1, "header must be 'N F'"));
    }
    let n: usize = toks[0]
        .parse()
        .map_err(|_| Error::parse(path, 1, "invalid pool count"))?;
    let f: usize = toks[1]
        .parse()
        .map_err(|_| Error::parse(path, 1, "invalid feature dimension"))?;
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 1 + f {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected id and {f} values, got {} tokens", toks.len()),
            ));
        }
        let vals: Result<Vec<f64>> = toks[1..].iter().map(|t| parse_f64(path, i + 1, t)).collect();
        out.push((toks[0].to_string(), Vector::new(vals?)));
    }
    if out.len() != n {
        return Err(Error::parse(
            path,
            1,
            format!("header promises {n} rows, found {}", out.len()),
        ));
    }
    Ok(out)
}

/// Write a retrieval pool in the format `load_pool` reads.
pub fn save_pool(pool: &[(String, Vector)], feat_dim: usize, path: &Path) -> Result<()> {
    let mut out = format!("{} {}\n", pool.len(), feat_dim);
    for (id, feat) in pool {
        out.push_str(id);
        fmt_floats(&mut out, &feat.data);
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}
