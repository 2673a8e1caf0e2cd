use std::collections::HashSet;
use std::f64::consts::PI;

use vl3d::phantom::{
    gen_dataset, gen_phantom, read_jsonl, samples_for, split_by_patient, write_jsonl, InstructionSample, LesionType,
    PhantomOptions, Task,
};
use vl3d::rng::RngHandle;
use vl3d::volume::AIR_HU;

fn noise_free() -> PhantomOptions {
    PhantomOptions { noise_sigma: 0.0, ..PhantomOptions::default() }
}

#[test]
fn lesion_voxel_counts_match_sphere_volume() {
    let opts = noise_free();
    let voxel_mm3: f64 = opts.spacing.iter().map(|&s| s as f64).product();
    let (mut counted, mut expected) = (0.0, 0.0);
    let mut ratios = Vec::new();
    for seed in 0..50 {
        let (vol, f) = gen_phantom(&mut RngHandle::new(seed), "p", &opts).unwrap();
        for l in &f.lesions {
            let n = vol.voxels().iter().filter(|&&v| v == l.kind.hu()).count() as f64;
            let want = 4.0 / 3.0 * PI * (l.diameter_mm / 2.0).powi(3) / voxel_mm3;
            counted += n;
            expected += want;
            ratios.push(n / want);
        }
    }
    let ratio = counted / expected;
    assert!((ratio - 1.0).abs() <= 0.15, "pooled ratio {ratio}");
    // Single small spheres cover a handful of voxels on a 4 mm slice grid,
    // so the bound is checked on aggregates rather than per lesion.
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 1.0).abs() <= 0.15, "mean ratio {mean}");
}

#[test]
fn lesion_free_phantom_holds_only_air_and_body() {
    let opts = noise_free();
    let mut seen = false;
    for seed in 0..200 {
        let (vol, f) = gen_phantom(&mut RngHandle::new(seed), "p", &opts).unwrap();
        if f.lesions.is_empty() {
            assert!(vol.voxels().iter().all(|&v| v == AIR_HU || v == 40));
            seen = true;
        }
    }
    assert!(seen, "no lesion-free phantom in 200 seeds");
}

#[test]
fn calcification_center_is_bright() {
    let opts = PhantomOptions::default();
    for seed in 0..40 {
        let (vol, f) = gen_phantom(&mut RngHandle::new(seed), "p", &opts).unwrap();
        for l in f.lesions.iter().filter(|l| l.kind == LesionType::Calcification) {
            let idx: [usize; 3] = std::array::from_fn(|a| (l.center_mm[a] / opts.spacing[a] as f64).round() as usize);
            let v = vol.get(idx[0], idx[1], idx[2]) as f64;
            assert!((v - 800.0).abs() <= 60.0, "center voxel {v}");
        }
    }
}

#[test]
fn lesion_labels_are_balanced() {
    let opts = PhantomOptions::default();
    let n = 500;
    let mut present = [0usize; 3];
    let master = RngHandle::new(1);
    for i in 0..n {
        let (_, f) = gen_phantom(&mut master.fork(i), "p", &opts).unwrap();
        for (k, t) in LesionType::ALL.iter().enumerate() {
            present[k] += usize::from(f.has(*t));
        }
    }
    for (k, t) in LesionType::ALL.iter().enumerate() {
        let frac = present[k] as f64 / n as f64;
        assert!((0.35..=0.65).contains(&frac), "{} present in {frac}", t.name());
    }
}

fn many_samples(n: usize) -> Vec<InstructionSample> {
    let opts = PhantomOptions { dims: [16, 16, 8], spacing: [6.0, 6.0, 12.0], noise_sigma: 0.0 };
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < n {
        let (_, f) = gen_phantom(&mut RngHandle::new(i), &format!("patient_{i:04}"), &opts).unwrap();
        out.extend(samples_for(&f, &format!("volumes/patient_{i:04}.rvol")));
        i += 1;
    }
    out.truncate(n);
    out
}

#[test]
fn jsonl_round_trip_on_1k_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let samples = many_samples(1000);
    write_jsonl(&samples, &path).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), samples);
}

#[test]
fn jsonl_errors_name_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = serde_json::to_string(&many_samples(1)[0]).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v.as_object_mut().unwrap().remove("answer");
    std::fs::write(&path, format!("{good}\n{v}\n")).unwrap();
    let err = read_jsonl(&path).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("answer"), "{err}");

    std::fs::write(&path, "").unwrap();
    assert!(read_jsonl(&path).unwrap().is_empty());
}

#[test]
fn patient_split_is_a_seeded_partition() {
    let samples = many_samples(800);
    let patients: HashSet<String> = samples.iter().map(|s| s.patient_id.clone()).collect();
    let (train, test) = split_by_patient(samples.clone(), 0.1, 3).unwrap();
    assert_eq!(train.len() + test.len(), samples.len());
    let tp: HashSet<&String> = train.iter().map(|s| &s.patient_id).collect();
    let sp: HashSet<&String> = test.iter().map(|s| &s.patient_id).collect();
    assert!(tp.is_disjoint(&sp));
    assert_eq!(tp.len() + sp.len(), patients.len());
    assert_eq!(sp.len(), (0.1 * patients.len() as f64).round() as usize);
    let (train2, test2) = split_by_patient(samples, 0.1, 3).unwrap();
    assert_eq!((train, test), (train2, test2));
}

#[test]
fn every_sample_is_derived_from_findings() {
    for seed in 0..30 {
        let (_, f) = gen_phantom(&mut RngHandle::new(seed), "p", &noise_free()).unwrap();
        let s = samples_for(&f, "v");
        assert_eq!(s.iter().filter(|x| x.task == Task::Diagnosis).count(), 3);
        assert_eq!(s.iter().filter(|x| x.task == Task::Vqa).count(), 2 * f.lesions.len());
        for x in s.iter().filter(|x| x.task == Task::Diagnosis) {
            let label = x.label.as_ref().unwrap();
            let kind = LesionType::parse(&label.disease).unwrap();
            assert_eq!(label.present, f.has(kind));
            assert_eq!(x.answer.starts_with("yes"), label.present);
        }
    }
}

#[test]
fn dataset_generation_is_deterministic() {
    let opts = PhantomOptions { dims: [16, 16, 8], spacing: [6.0, 6.0, 12.0], noise_sigma: 20.0 };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(a.path(), 12, 5, &opts, 0.25).unwrap();
    gen_dataset(b.path(), 12, 5, &opts, 0.25).unwrap();
    for f in ["manifest.json", "train.jsonl", "test.jsonl", "volumes/patient_0007.rvol"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
