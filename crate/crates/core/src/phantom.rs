//! Synthetic CT phantoms with exact ground truth, templated reports and
//! instruction samples.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::volume::{write_rvol, Volume, AIR_HU};

pub const GENERATOR_VERSION: &str = "phantom-1";
pub const BODY_HU: i16 = 40;
pub const NOISE_SIGMA_HU: f64 = 20.0;
pub const DIAMETER_RANGE_MM: (f64, f64) = (4.0, 20.0);
/// Fraction of each axis covered by the body ellipsoid.
pub const BODY_FRACTION: f64 = 0.7;
pub const LESION_PRESENCE: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionType {
    Nodule,
    Cyst,
    Calcification,
}

impl LesionType {
    pub const ALL: [LesionType; 3] = [LesionType::Nodule, LesionType::Cyst, LesionType::Calcification];

    pub fn name(self) -> &'static str {
        match self {
            LesionType::Nodule => "nodule",
            LesionType::Cyst => "cyst",
            LesionType::Calcification => "calcification",
        }
    }

    pub fn hu(self) -> i16 {
        match self {
            LesionType::Nodule => 80,
            LesionType::Cyst => -20,
            LesionType::Calcification => 800,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    #[serde(rename = "type")]
    pub kind: LesionType,
    pub diameter_mm: f64,
    /// Center in millimetres, voxel `i` sitting at `i · spacing`.
    pub center_mm: [f64; 3],
    pub region: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomFindings {
    pub patient_id: String,
    pub lesions: Vec<Lesion>,
}

impl PhantomFindings {
    pub fn has(&self, kind: LesionType) -> bool {
        self.lesions.iter().any(|l| l.kind == kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomOptions {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub noise_sigma: f64,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self { dims: [48, 48, 24], spacing: [2.0, 2.0, 4.0], noise_sigma: NOISE_SIGMA_HU }
    }
}

/// Octant name of a point relative to the body center. `y` below the
/// center is anterior, `z` at or above it is upper, `x` below it is left.
pub fn octant(p: [f64; 3], center: [f64; 3]) -> String {
    let ap = if p[1] < center[1] { "anterior" } else { "posterior" };
    let ul = if p[2] >= center[2] { "upper" } else { "lower" };
    let lr = if p[0] < center[0] { "left" } else { "right" };
    format!("{ap} {ul} {lr}")
}

pub const REGIONS: [&str; 8] = [
    "anterior upper left",
    "anterior upper right",
    "anterior lower left",
    "anterior lower right",
    "posterior upper left",
    "posterior upper right",
    "posterior lower left",
    "posterior lower right",
];

struct Body {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Body {
    /// Whether a sphere lies inside the ellipsoid. Shrinking every semi-axis
    /// by the radius gives a sufficient condition.
    fn contains_sphere(&self, c: [f64; 3], r: f64) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let inner = self.semi[a] - r;
            if inner <= 0.0 {
                return false;
            }
            s += ((c[a] - self.center[a]) / inner).powi(2);
        }
        s <= 1.0
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn place_lesions(kinds: &[LesionType], body: &Body, rng: &mut RngHandle) -> Option<Vec<Lesion>> {
    let mut placed: Vec<Lesion> = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let d = rng.uniform_range(DIAMETER_RANGE_MM.0, DIAMETER_RANGE_MM.1);
            let r = d / 2.0;
            let c: [f64; 3] = std::array::from_fn(|a| body.center[a] + rng.uniform_range(-body.semi[a], body.semi[a]));
            let clear = placed.iter().all(|o| {
                let dist = (0..3).map(|a| (o.center_mm[a] - c[a]).powi(2)).sum::<f64>().sqrt();
                dist >= r + o.diameter_mm / 2.0
            });
            if clear && body.contains_sphere(c, r) {
                ok = Some(Lesion { kind, diameter_mm: d, center_mm: c, region: octant(c, body.center) });
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

/// One phantom volume and its exact findings.
pub fn gen_phantom(rng: &mut RngHandle, patient_id: &str, opts: &PhantomOptions) -> Result<(Volume, PhantomFindings)> {
    let [nx, ny, nz] = opts.dims;
    let sp = opts.spacing.map(f64::from);
    let extent: [f64; 3] = std::array::from_fn(|a| (opts.dims[a] - 1) as f64 * sp[a]);
    let body = Body {
        center: std::array::from_fn(|a| extent[a] / 2.0 + rng.uniform_range(-0.02, 0.02) * extent[a]),
        semi: std::array::from_fn(|a| {
            let full = opts.dims[a] as f64 * sp[a];
            full * BODY_FRACTION / 2.0 * rng.uniform_range(0.95, 1.05)
        }),
    };

    let mut lesions = None;
    while lesions.is_none() {
        let kinds: Vec<LesionType> = LesionType::ALL.into_iter().filter(|_| rng.bernoulli(LESION_PRESENCE)).collect();
        lesions = place_lesions(&kinds, &body, rng);
    }
    let lesions = lesions.expect("loop exits with a placement");

    let mut vol = Volume::filled(opts.dims, opts.spacing, AIR_HU)?;
    let vox = vol.voxels_mut();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
                let mut hu = if body.contains(p) { BODY_HU } else { AIR_HU } as f64;
                for l in &lesions {
                    let r2 = (l.diameter_mm / 2.0).powi(2);
                    if (0..3).map(|a| (p[a] - l.center_mm[a]).powi(2)).sum::<f64>() <= r2 {
                        hu = l.kind.hu() as f64;
                    }
                }
                if opts.noise_sigma > 0.0 {
                    hu += opts.noise_sigma * rng.normal();
                }
                vox[x + nx * (y + ny * z)] = hu.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            }
        }
    }
    Ok((vol, PhantomFindings { patient_id: patient_id.to_string(), lesions }))
}

pub fn diameter_text(d: f64) -> String {
    format!("{}", d.round() as i64)
}

pub fn render_report(f: &PhantomFindings) -> String {
    if f.lesions.is_empty() {
        return "no abnormality is detected .".to_string();
    }
    f.lesions
        .iter()
        .map(|l| {
            format!(
                "a {} of diameter {} mm is present in the {} region .",
                l.kind.name(),
                diameter_text(l.diameter_mm),
                l.region
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn diagnosis_question(kind: LesionType) -> String {
    format!("does this image show signs of {} ?", kind.name())
}

pub fn diagnosis_answer(kind: LesionType, present: bool) -> String {
    if present {
        format!("yes , a {} is present .", kind.name())
    } else {
        format!("no , there is no sign of {} .", kind.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub label: Option<DiagnosisLabel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisLabel {
    pub disease: String,
    pub present: bool,
}

/// Diagnosis questions for every lesion type, then size and location
/// questions for each present lesion.
pub fn gen_qa(f: &PhantomFindings) -> Vec<QaPair> {
    let mut out: Vec<QaPair> = LesionType::ALL
        .into_iter()
        .map(|t| QaPair {
            question: diagnosis_question(t),
            answer: diagnosis_answer(t, f.has(t)),
            label: Some(DiagnosisLabel { disease: t.name().to_string(), present: f.has(t) }),
        })
        .collect();
    for l in &f.lesions {
        let t = l.kind.name();
        out.push(QaPair {
            question: format!("what is the diameter of the {t} ?"),
            answer: format!("the {t} measures {} mm .", diameter_text(l.diameter_mm)),
            label: None,
        });
        out.push(QaPair {
            question: format!("where is the {t} located ?"),
            answer: format!("the {t} is located in the {} region .", l.region),
            label: None,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Report,
    Vqa,
    Diagnosis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSample {
    pub id: String,
    pub patient_id: String,
    pub volume_path: String,
    pub task: Task,
    pub question: String,
    pub answer: String,
    pub label: Option<DiagnosisLabel>,
}

/// All instruction samples for one phantom: one report, three diagnosis
/// questions, and size/location questions per lesion.
pub fn samples_for(f: &PhantomFindings, volume_path: &str) -> Vec<InstructionSample> {
    let mut out = vec![InstructionSample {
        id: format!("{}-report", f.patient_id),
        patient_id: f.patient_id.clone(),
        volume_path: volume_path.to_string(),
        task: Task::Report,
        question: String::new(),
        answer: render_report(f),
        label: None,
    }];
    for (i, qa) in gen_qa(f).into_iter().enumerate() {
        let task = if qa.label.is_some() { Task::Diagnosis } else { Task::Vqa };
        out.push(InstructionSample {
            id: format!("{}-qa{i}", f.patient_id),
            patient_id: f.patient_id.clone(),
            volume_path: volume_path.to_string(),
            task,
            question: qa.question,
            answer: qa.answer,
            label: qa.label,
        });
    }
    out
}

/// Patient-wise split; the test side holds `round(fraction · patients)`
/// patients.
pub fn split_by_patient(
    samples: Vec<InstructionSample>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<InstructionSample>, Vec<InstructionSample>)> {
    let patients: Vec<String> = samples.iter().map(|s| s.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if patients.len() < 2 {
        return Err(Error::Data(format!("patient split needs at least 2 patients, found {}", patients.len())));
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction must lie in [0, 1], got {test_fraction}")));
    }
    let n_test = (test_fraction * patients.len() as f64).round() as usize;
    let perm = RngHandle::new(seed).permutation(patients.len());
    let test_ids: HashSet<&str> = perm[..n_test].iter().map(|&i| patients[i].as_str()).collect();
    Ok(samples.into_iter().partition(|s| !test_ids.contains(s.patient_id.as_str())))
}

pub fn write_jsonl(samples: &[InstructionSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).expect("samples serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<InstructionSample>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub volumes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_patients: usize,
    pub test_patients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub generator_version: String,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub test_fraction: f64,
    pub counts: DatasetCounts,
}

pub fn patient_id(i: usize) -> String {
    format!("patient_{i:04}")
}

/// Writes `volumes/*.rvol`, `train.jsonl`, `test.jsonl` and
/// `manifest.json` under `dir`. Volume `i` draws from its own stream of
/// the master seed, so output does not depend on thread count.
pub fn gen_dataset(dir: impl AsRef<Path>, n: usize, seed: u64, opts: &PhantomOptions, test_fraction: f64) -> Result<Manifest> {
    let dir = dir.as_ref();
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let master = RngHandle::new(seed);
    let per_volume: Vec<Vec<InstructionSample>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = master.fork(i as u64);
            let pid = patient_id(i);
            let (vol, findings) = gen_phantom(&mut rng, &pid, opts)?;
            let rel = format!("volumes/{pid}.rvol");
            write_rvol(&vol, dir.join(&rel))?;
            Ok(samples_for(&findings, &rel))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<InstructionSample> = per_volume.into_iter().flatten().collect();
    let (train, test) = split_by_patient(samples, test_fraction, seed)?;
    write_jsonl(&train, dir.join("train.jsonl"))?;
    write_jsonl(&test, dir.join("test.jsonl"))?;
    let patients = |s: &[InstructionSample]| s.iter().map(|x| &x.patient_id).collect::<HashSet<_>>().len();
    let manifest = Manifest {
        seed,
        generator_version: GENERATOR_VERSION.to_string(),
        dims: opts.dims,
        spacing: opts.spacing,
        test_fraction,
        counts: DatasetCounts {
            volumes: n,
            train_samples: train.len(),
            test_samples: test.len(),
            train_patients: patients(&train),
            test_patients: patients(&test),
        },
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn findings(lesions: Vec<(LesionType, f64, &str)>) -> PhantomFindings {
        PhantomFindings {
            patient_id: "p".into(),
            lesions: lesions
                .into_iter()
                .map(|(kind, d, r)| Lesion { kind, diameter_mm: d, center_mm: [0.0; 3], region: r.into() })
                .collect(),
        }
    }

    #[test]
    fn report_templates() {
        assert_eq!(render_report(&findings(vec![])), "no abnormality is detected .");
        assert_eq!(
            render_report(&findings(vec![(LesionType::Nodule, 10.2, "anterior upper left")])),
            "a nodule of diameter 10 mm is present in the anterior upper left region ."
        );
        let two = render_report(&findings(vec![
            (LesionType::Cyst, 5.0, "posterior lower right"),
            (LesionType::Nodule, 7.0, "anterior upper left"),
        ]));
        assert_eq!(
            two,
            "a cyst of diameter 5 mm is present in the posterior lower right region . \
             a nodule of diameter 7 mm is present in the anterior upper left region ."
        );
    }

    #[test]
    fn qa_templates() {
        let qa = gen_qa(&findings(vec![(LesionType::Cyst, 6.0, "anterior lower left")]));
        assert_eq!(qa.len(), 5);
        assert_eq!(qa[1].answer, "yes , a cyst is present .");
        assert_eq!(qa[0].answer, "no , there is no sign of nodule .");
        assert_eq!(qa[2].answer, "no , there is no sign of calcification .");
        let qa = gen_qa(&findings(vec![(LesionType::Nodule, 12.0, "anterior lower left")]));
        assert_eq!(qa[3].answer, "the nodule measures 12 mm .");
        let none = gen_qa(&findings(vec![]));
        assert_eq!(none.len(), 3);
        assert!(none.iter().all(|q| q.answer.starts_with("no ,") && !q.label.as_ref().unwrap().present));
    }

    #[test]
    fn octant_names() {
        let c = [10.0, 10.0, 10.0];
        assert_eq!(octant([0.0, 0.0, 20.0], c), "anterior upper left");
        assert_eq!(octant([20.0, 20.0, 0.0], c), "posterior lower right");
        let mut seen: Vec<String> = (0..8)
            .map(|i| octant([(i & 1) as f64 * 20.0, (i >> 1 & 1) as f64 * 20.0, (i >> 2) as f64 * 20.0], c))
            .collect();
        seen.sort();
        let mut all: Vec<String> = REGIONS.iter().map(|s| s.to_string()).collect();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn zero_lesion_phantom_is_air_and_body() {
        let opts = PhantomOptions { noise_sigma: 0.0, ..PhantomOptions::default() };
        for seed in 0..40 {
            let (v, f) = gen_phantom(&mut RngHandle::new(seed), "p", &opts).unwrap();
            if f.lesions.is_empty() {
                assert!(v.voxels().iter().all(|&x| x == AIR_HU || x == BODY_HU));
                return;
            }
        }
        panic!("no lesion-free phantom in 40 seeds");
    }

    #[test]
    fn phantom_is_deterministic() {
        let opts = PhantomOptions::default();
        let a = gen_phantom(&mut RngHandle::new(5), "p", &opts).unwrap();
        let b = gen_phantom(&mut RngHandle::new(5), "p", &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_partitions_patients() {
        let samples: Vec<InstructionSample> = (0..100)
            .flat_map(|i| samples_for(&PhantomFindings { patient_id: patient_id(i), lesions: vec![] }, "v"))
            .collect();
        let (train, test) = split_by_patient(samples.clone(), 0.1, 3).unwrap();
        let tp: HashSet<_> = test.iter().map(|s| s.patient_id.clone()).collect();
        assert_eq!(tp.len(), 10);
        assert!(train.iter().all(|s| !tp.contains(&s.patient_id)));
        assert_eq!(train.len() + test.len(), samples.len());
        assert_eq!(split_by_patient(samples, 0.1, 3).unwrap().1, test);
        let one = samples_for(&PhantomFindings { patient_id: "x".into(), lesions: vec![] }, "v");
        assert!(split_by_patient(one, 0.1, 0).is_err());
    }

    #[test]
    fn jsonl_errors_name_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_jsonl(&p).unwrap().is_empty());
        let good = samples_for(&PhantomFindings { patient_id: "x".into(), lesions: vec![] }, "v");
        let mut text = serde_json::to_string(&good[0]).unwrap() + "\n";
        text.push_str(r#"{"id":"a","patient_id":"x","volume_path":"v","task":"vqa","question":"q","label":null}"#);
        fs::write(&p, text).unwrap();
        let err = read_jsonl(&p).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("answer"), "{err}");
    }
}
