//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{chi_square, chi_square_critical, cifar_like, contains_any, dir_bytes, enumerate_ranks};
use itertools::Itertools;
use num_bigint::BigUint;
use permcollab::dataset::{encrypt_dataset, EncryptConfig, Shard};
use permcollab::embed::{EmbedInstance, TOLERANCE};
use permcollab::proto::{
    cost_report, upload, CostParams, Fault, FaultPlan, LoopbackConnector, Regime, Server, ServerConfig, UploadOptions,
};
use permcollab::{
    decrypt, derive_key, encrypt, keyspace_size, random_permutation, Convention, ImageTensor, KeyDerivationContext,
    MasterSecret, Permutation, PermutationMatrix, Restriction, RestrictionSpec,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type MatrixCase = (&'static str, Vec<Vec<u8>>, Vec<u32>, BTreeSet<u32>);
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const CONFIGS: [(u32, u32); 9] = [
    (196, 768), // plain
    (0, 768),
    (147, 576),
    (49, 576),
    (98, 384),
    (147, 192),
    (49, 192),
    (196, 0),
    (0, 0),
];

fn round_trip() -> Outcome {
    const IMAGES: u64 = 1000;
    let start = Instant::now();
    let secret = MasterSecret::from_seed(7);
    let mut failures = 0u64;
    for (cfg_idx, &(nbs, nps)) in CONFIGS.iter().enumerate() {
        let rbs = Restriction::new(196, nbs).map_err(|e| e.to_string())?;
        let rps = Restriction::new(768, nps).map_err(|e| e.to_string())?;
        failures += (0..IMAGES)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg_idx as u64 * IMAGES + i);
                let mut data = vec![0u8; 224 * 224 * 3];
                rng.fill_bytes(&mut data);
                let x = ImageTensor::new(224, 224, 3, data).unwrap();
                let ctx = KeyDerivationContext {
                    master_secret: &secret,
                    client_id: cfg_idx as u32,
                    image_id: i,
                    epoch: 0,
                };
                let key = derive_key(&ctx, rbs, rps, 16).unwrap();
                let e = encrypt(&x, &key).unwrap();
                u64::from(decrypt(&e, &key).map_or(true, |y| y != x))
            })
            .sum::<u64>();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(failures == 0, || format!("{failures} of {} images did not round-trip", 9 * IMAGES))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("9 configs x {IMAGES} images bit-exact in {secs:.1} s"))
}

fn naive_matrix(seq: &[u32], conv: Convention) -> Vec<Vec<u8>> {
    let n = seq.len();
    let mut m = vec![vec![0u8; n]; n];
    for (k, &s) in seq.iter().enumerate() {
        let s = s as usize - 1;
        match conv {
            Convention::Block => m[s][k] = 1,
            Convention::Pixel => m[k][s] = 1,
        }
    }
    m
}

fn row_times(x: &[u32], m: &[Vec<u8>]) -> Vec<u32> {
    let n = x.len();
    (0..n).map(|j| (0..n).map(|i| x[i] * m[i][j] as u32).sum()).collect()
}

fn permutation_algebra() -> Outcome {
    let mut cases = 0;
    let mut deviations = Vec::new();
    for n in 1..=4u32 {
        for seq in (1..=n).permutations(n as usize) {
            let p = Permutation::from_seq(&seq).map_err(|e| e.to_string())?;
            for conv in [Convention::Block, Convention::Pixel] {
                cases += 1;
                let m = naive_matrix(&seq, conv);
                let built: Vec<Vec<u8>> = p.to_matrix(conv).rows().map(<[u8]>::to_vec).collect();
                if built != m {
                    deviations.push(format!("to_matrix {seq:?} {conv:?}"));
                }
                let parsed = PermutationMatrix::from_rows(&m).map_err(|e| e.to_string())?;
                if parsed.to_permutation(conv) != p {
                    deviations.push(format!("to_permutation {seq:?} {conv:?}"));
                }
                let x: Vec<u32> = (0..n).map(|i| 10 + i * 7).collect();
                if p.apply(&x, conv).map_err(|e| e.to_string())? != row_times(&x, &m) {
                    deviations.push(format!("apply {seq:?} {conv:?}"));
                }
                // inverse is the transpose, and undoes apply
                let inv = naive_matrix(&p.inverse().seq(), conv);
                let transposed: Vec<Vec<u8>> = (0..n as usize).map(|i| (0..n as usize).map(|j| m[j][i]).collect()).collect();
                if inv != transposed {
                    deviations.push(format!("inverse {seq:?} {conv:?}"));
                }
                let y = p.apply(&x, conv).map_err(|e| e.to_string())?;
                if p.inverse().apply(&y, conv).map_err(|e| e.to_string())? != x {
                    deviations.push(format!("inverse apply {seq:?} {conv:?}"));
                }
            }
        }
    }
    ensure(deviations.is_empty(), || format!("{} deviations, first {}", deviations.len(), deviations[0]))?;
    Ok(format!("{cases} (permutation, convention) cases, 0 deviations"))
}

fn restriction_soundness() -> Outcome {
    const DRAWS: usize = 10_000;
    const ALPHA: f64 = 0.001;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut notes = Vec::new();
    for n_fixed in [0u32, 2, 4, 8] {
        let spec = Restriction::new(8, n_fixed).map_err(|e| e.to_string())?.sample(&mut rng);
        let complement: Vec<u32> = (1..=8).filter(|i| !spec.fixed_positions().contains(i)).collect();
        let draws: Vec<Permutation> = (0..DRAWS).map(|_| random_permutation(&spec, &mut rng)).collect();
        for d in &draws {
            ensure(spec.is_satisfied_by(d), || format!("n_fixed={n_fixed}: fixed position moved"))?;
        }
        if n_fixed == 8 {
            ensure(draws.iter().all(Permutation::is_identity), || "n_fixed=8 produced a non-identity".into())?;
            notes.push("8: identity".to_string());
            continue;
        }
        let ranks = enumerate_ranks(&complement);
        let cells = ranks.len();
        // whole complement group when every cell expects at least 5
        // draws, otherwise equal buckets of lexicographic rank
        let buckets = if cells * 5 <= DRAWS { cells } else { 40 };
        let mut counts = vec![0u64; buckets];
        for d in &draws {
            let seq = d.seq();
            let values: Vec<u32> = complement.iter().map(|&i| seq[i as usize - 1]).collect();
            counts[ranks[&values] * buckets / cells] += 1;
        }
        let stat = chi_square(&counts, &vec![DRAWS as f64 / buckets as f64; buckets]);
        let crit = chi_square_critical(buckets - 1, ALPHA);
        ensure(stat < crit, || format!("n_fixed={n_fixed}: chi2 {stat:.1} >= {crit:.1}"))?;
        notes.push(format!("{n_fixed}: chi2 {stat:.1} < {crit:.1} (df {})", buckets - 1));
    }
    Ok(format!("{DRAWS} draws each; {}", notes.join("; ")))
}

fn reference_matrices() -> Outcome {
    let restricted = vec![
        vec![1, 0, 0, 0, 0],
        vec![0, 0, 0, 0, 1],
        vec![0, 0, 1, 0, 0],
        vec![0, 1, 0, 0, 0],
        vec![0, 0, 0, 1, 0],
    ];
    let unrestricted = vec![
        vec![0, 0, 1, 0, 0],
        vec![1, 0, 0, 0, 0],
        vec![0, 0, 0, 0, 1],
        vec![0, 1, 0, 0, 0],
        vec![0, 0, 0, 1, 0],
    ];
    let cases: [MatrixCase; 2] = [
        ("restricted", restricted, vec![1, 4, 3, 5, 2], BTreeSet::from([1, 3])),
        ("unrestricted", unrestricted, vec![2, 4, 1, 5, 3], BTreeSet::new()),
    ];
    for (name, rows, seq, fixed) in cases {
        let m = PermutationMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let p = m.to_permutation(Convention::Block);
        ensure(p.seq() == seq, || format!("{name}: seq {:?}", p.seq()))?;
        ensure(p.fixed_points() == fixed, || format!("{name}: fixed {:?}", p.fixed_points()))?;
        ensure(p.to_matrix(Convention::Block) == m, || format!("{name}: matrix does not round-trip"))?;
    }
    Ok("[1,4,3,5,2] fixes {1,3}; [2,4,1,5,3] fixes none".into())
}

fn embedding_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE3BED);
    let (mut worst_abs, mut worst_scr) = (0f64, 0f64);
    for _ in 0..100 {
        let inst = EmbedInstance::random_small(&mut rng).map_err(|e| e.to_string())?;
        let a = inst.check_absorption().map_err(|e| e.to_string())?;
        let s = inst.check_scramble().map_err(|e| e.to_string())?;
        ensure(a.passed && s.passed, || format!("failed instance: {a:?} {s:?}"))?;
        worst_abs = worst_abs.max(a.max_deviation);
        worst_scr = worst_scr.max(s.max_deviation);
    }
    ensure(worst_abs <= TOLERANCE && worst_scr <= TOLERANCE, || format!("{worst_abs:e} / {worst_scr:e}"))?;
    Ok(format!("100 instances each; max deviation {worst_abs:.1e} (pixel shuffle), {worst_scr:.1e} (block scramble)"))
}

fn protocol_end_to_end() -> Outcome {
    const CLIENTS: u32 = 5;
    const IMAGES: usize = 100;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let srv = Arc::new(Server::new(ServerConfig::new(dir.path(), CLIENTS as usize)).map_err(|e| e.to_string())?);
    srv.set_model(b"placeholder".to_vec());

    let mut patterns = Vec::new();
    let mut uploads = Vec::new();
    for c in 1..=CLIENTS {
        let cfg = EncryptConfig::vit(c, 0, [0, 49, 98, 147, 0][c as usize - 1], [0, 192, 384, 576, 768][c as usize - 1]);
        let out = encrypt_dataset(&cifar_like(IMAGES, c as u64), &MasterSecret::from_seed(c as u64), &cfg, true)
            .map_err(|e| e.to_string())?;
        for (_, k) in out.keys.iter() {
            patterns.push(k.to_bytes());
            patterns.push(k.block_perm().to_bytes());
            patterns.push(k.pixel_perm().to_bytes());
        }
        uploads.push((c, out.shard));
    }
    let record_len = uploads[0].1.geometry.record_len();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = uploads
            .iter()
            .map(|(c, shard)| {
                let srv = Arc::clone(&srv);
                // every client loses its first connection part-way through
                let cut = 34 + 3 * (17 + 8 * record_len) + 100 * *c as usize;
                let plan = FaultPlan::new([Some(Fault::DropAfterBytes(cut)), None]);
                s.spawn(move || {
                    let conn = LoopbackConnector::with_faults(srv, plan);
                    upload(&conn, std::slice::from_ref(shard), *c, UploadOptions { records_per_batch: 8, max_retries: 3 })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in &results {
        let r = r.as_ref().map_err(|e| e.to_string())?;
        ensure(r.connections == 2, || format!("client {} used {} connections", r.client_id, r.connections))?;
    }
    let manifest = srv.wait_sealed(Duration::from_secs(30)).ok_or("manifest never sealed")?;
    manifest.verify(dir.path()).map_err(|e| e.to_string())?;
    let mut ids = HashSet::new();
    for path in manifest.shard_paths(dir.path()) {
        for r in Shard::read_file(path).map_err(|e| e.to_string())?.records {
            ensure(ids.insert(r.id()), || format!("duplicate record {:?}", r.id()))?;
        }
    }
    let expected = CLIENTS as usize * IMAGES;
    ensure(ids.len() == expected && manifest.total_records == expected as u64, || {
        format!("{} unique records, manifest says {}", ids.len(), manifest.total_records)
    })?;
    let files = dir_bytes(dir.path());
    for (name, bytes) in &files {
        ensure(!contains_any(bytes, &patterns), || format!("key serialization found in {name}"))?;
    }
    let sessions = srv.logical_sessions();
    ensure(sessions.len() == CLIENTS as usize && sessions.values().all(|&n| n == 1), || {
        format!("logical sessions {sessions:?}")
    })?;
    Ok(format!(
        "{expected} unique records from {CLIENTS} clients after drop/resume; {} files, {} key serializations absent; 1 session per client",
        files.len(),
        patterns.len()
    ))
}

fn cost_model() -> Outcome {
    let params = |model_bytes| CostParams {
        m_clients: 5,
        images_per_client: 10_000,
        bytes_per_image: 150_528,
        model_bytes,
        fl_rounds: 100,
        fl_participation: 1.0,
    };
    let r = cost_report(&params(330_000_000)).map_err(|e| e.to_string())?;
    let upload = 5u64 * 10_000 * 150_528;
    let final_model = 5u64 * 330_000_000;
    ensure(upload == 7_526_400_000 && r.one_shot_upload_bytes == upload, || format!("upload {}", r.one_shot_upload_bytes))?;
    ensure(r.one_shot_total_bytes == upload + final_model, || format!("one-shot {}", r.one_shot_total_bytes))?;
    let fl = 100 * 5 * 2 * 330_000_000u64 + final_model;
    ensure(fl == 331_650_000_000 && r.fl_total_bytes == fl, || format!("fl {}", r.fl_total_bytes))?;
    ensure(r.regime == Regime::OneShotCheaper, || format!("{:?}", r.regime))?;

    let crossover = upload / (100 * 2 * 5);
    ensure(crossover == 7_526_400 && r.crossover_model_bytes == Some(crossover as f64), || {
        format!("crossover {:?}", r.crossover_model_bytes)
    })?;
    for (m, want) in [
        (crossover - 1, Regime::FederatedCheaper),
        (crossover, Regime::Equal),
        (crossover + 1, Regime::OneShotCheaper),
    ] {
        let got = cost_report(&params(m)).map_err(|e| e.to_string())?.regime;
        ensure(got == want, || format!("model {m}: {got:?}, expected {want:?}"))?;
    }
    Ok(format!("one-shot {} B, FL {} B, crossover at {crossover} B model", r.one_shot_total_bytes, r.fl_total_bytes))
}

fn keyspace_counting() -> Outcome {
    let mut checked = 0;
    for n in 1..=6u32 {
        let perms: Vec<Vec<u32>> = (1..=n).permutations(n as usize).collect();
        for fixed in (1..=n).powerset() {
            let spec = RestrictionSpec::new(n, fixed.iter().copied()).map_err(|e| e.to_string())?;
            let brute = perms
                .iter()
                .filter(|p| fixed.iter().all(|&i| p[i as usize - 1] == i))
                .count();
            let got = keyspace_size(&spec);
            ensure(got == BigUint::from(brute), || format!("n={n} fixed={fixed:?}: {got} vs {brute}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (n, fixed set) specs match enumeration"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("round-trip correctness", round_trip),
        ("permutation algebra vs brute force", permutation_algebra),
        ("restriction soundness", restriction_soundness),
        ("reference-matrix fidelity", reference_matrices),
        ("embedding identities", embedding_identities),
        ("protocol end-to-end", protocol_end_to_end),
        ("cost model", cost_model),
        ("keyspace counting", keyspace_counting),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
