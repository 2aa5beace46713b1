use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use permcollab::dataset::{
    encrypt_dataset, export_png, ingest_cifar10, ingest_cifar10_split, read_cifar10_file, resize, sha256_hex,
    CifarSplit, DatasetManifest, EncryptConfig, PlainDataset, Shard, ShardGeometry, MANIFEST_FILE,
};
use permcollab::embed::run_trials;
use permcollab::proto::{cost_report, fetch_model, serve_with, upload, CostParams, ServerConfig, TcpConnector, UploadOptions};
use permcollab::{decrypt, encrypt as encrypt_image, ImageTensor, KeyCache, MasterSecret};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{
    usage, Cli, Command, CostArgs, EmbedArgs, EncryptArgs, ExportArgs, FetchArgs, Format, KeygenArgs, SecretArgs,
    ServeArgs, Split, UploadArgs, VerifyArgs,
};

pub const SECRET_ENV: &str = "PERMCOLLAB_MASTER_SECRET";

pub fn run(cli: &Cli) -> Result<()> {
    let out = Output(cli.format);
    match &cli.command {
        Command::KeygenConfig(a) => keygen_config(a, out),
        Command::Encrypt(a) => encrypt(a, out),
        Command::Serve(a) => serve(a, out),
        Command::Upload(a) => upload_cmd(a, out),
        Command::FetchModel(a) => fetch(a, out),
        Command::VerifyRoundtrip(a) => verify(a, out),
        Command::ExportPng(a) => export(a, out),
        Command::EmbedCheck(a) => embed_check(a, out),
        Command::Cost(a) => cost(a, out),
    }
}

#[derive(Clone, Copy)]
struct Output(Format);

impl Output {
    fn emit<T: Serialize>(self, value: &T, text: impl FnOnce(&T) -> String) -> Result<()> {
        let mut stdout = std::io::stdout().lock();
        match self.0 {
            Format::Json => writeln!(stdout, "{}", serde_json::to_string(value)?)?,
            Format::Text => writeln!(stdout, "{}", text(value))?,
        }
        stdout.flush()?;
        Ok(())
    }
}

/// Client-local settings written by keygen-config. Holds the master secret,
/// so it never leaves the client.
#[derive(Debug, Serialize, Deserialize)]
struct ClientConfig {
    master_secret: String,
    client_id: u32,
    p: usize,
    size: usize,
    n_fixed_bs: u32,
    n_fixed_ps: u32,
    epoch: u32,
}

/// Checks block size, image side and restriction counts against each other.
fn check_geometry(p: usize, size: usize, nbs: u32, nps: u32) -> Result<ShardGeometry> {
    if p == 0 || size == 0 {
        return Err(usage("--p and --size must be positive"));
    }
    if !size.is_multiple_of(p) {
        return Err(usage(format!("--size {size} is not a multiple of --p {p}")));
    }
    let g = ShardGeometry::new(size, size, 3, p).map_err(|e| usage(e.to_string()))?;
    if nbs > g.n_blocks {
        return Err(usage(format!("--nbs {nbs} exceeds N = {}", g.n_blocks)));
    }
    if nps > g.l_vec {
        return Err(usage(format!("--nps {nps} exceeds L = {}", g.l_vec)));
    }
    Ok(g)
}

fn keygen_config(a: &KeygenArgs, out: Output) -> Result<()> {
    let g = check_geometry(a.p, a.size, a.nbs, a.nps)?;
    if a.out.exists() && !a.force {
        return Err(usage(format!("{} exists; pass --force to replace it", a.out.display())));
    }
    let secret = a.seed.map_or_else(MasterSecret::random, MasterSecret::from_seed);
    let cfg = ClientConfig {
        master_secret: hex::encode(secret.expose()),
        client_id: a.client_id,
        p: a.p,
        size: a.size,
        n_fixed_bs: a.nbs,
        n_fixed_ps: a.nps,
        epoch: a.epoch,
    };
    write_private(&a.out, &serde_json::to_vec_pretty(&cfg)?)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a Path,
        client_id: u32,
        n_blocks: u32,
        l_vec: u32,
    }
    out.emit(
        &Summary {
            config: &a.out,
            client_id: a.client_id,
            n_blocks: g.n_blocks,
            l_vec: g.l_vec,
        },
        |s| format!("wrote {} for client {} (N={}, L={})", s.config.display(), s.client_id, s.n_blocks, s.l_vec),
    )
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)?;
    Ok(())
}

pub const KEY_CACHE_FILE: &str = "keys.pckc";

/// A directory argument (existing, or written with a trailing slash) holds
/// the cache as `keys.pckc`.
fn key_cache_path(p: &Path, create: bool) -> Result<PathBuf> {
    if p.is_dir() || p.to_string_lossy().ends_with('/') {
        if create {
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
        }
        return Ok(p.join(KEY_CACHE_FILE));
    }
    Ok(p.to_path_buf())
}

fn load_client_config(path: &Path) -> Result<ClientConfig> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_secret(s: &SecretArgs, config: Option<&ClientConfig>) -> Result<MasterSecret> {
    if let Some(seed) = s.seed {
        return Ok(MasterSecret::from_seed(seed));
    }
    if let Some(c) = config {
        return MasterSecret::from_hex(&c.master_secret).map_err(|e| usage(format!("config secret: {e}")));
    }
    match std::env::var(SECRET_ENV) {
        Ok(hex) => MasterSecret::from_hex(hex.trim()).map_err(|e| usage(format!("{SECRET_ENV}: {e}"))),
        Err(_) => Err(usage(format!("no master secret: pass --seed, --config, or set {SECRET_ENV}"))),
    }
}

fn load_plain(path: &Path, split: Option<Split>) -> Result<PlainDataset> {
    let ds = match split {
        None => ingest_cifar10(path),
        Some(Split::Train) => ingest_cifar10_split(path, CifarSplit::Train),
        Some(Split::Test) => ingest_cifar10_split(path, CifarSplit::Test),
    };
    ds.with_context(|| format!("reading CIFAR-10 data from {}", path.display()))
}

fn encrypt(a: &EncryptArgs, out: Output) -> Result<()> {
    let config = a.secret.config.as_deref().map(load_client_config).transpose()?;
    let pick = |flag: Option<u32>, from: fn(&ClientConfig) -> u32, default: u32| {
        flag.or(config.as_ref().map(from)).unwrap_or(default)
    };
    let p = a.p.or(config.as_ref().map(|c| c.p)).unwrap_or(16);
    let size = a.size.or(config.as_ref().map(|c| c.size)).unwrap_or(224);
    let nbs = pick(a.nbs, |c| c.n_fixed_bs, 0);
    let nps = pick(a.nps, |c| c.n_fixed_ps, 0);
    let epoch = pick(a.epoch, |c| c.epoch, 0);
    let client_id = pick(a.client_id, |c| c.client_id, 1);
    let geometry = check_geometry(p, size, nbs, nps)?;
    let secret = resolve_secret(&a.secret, config.as_ref())?;
    if a.out.is_file() {
        return Err(usage(format!("--out {} is a file", a.out.display())));
    }

    let mut ds = load_plain(&a.input, a.split)?;
    if let Some(n) = a.limit {
        ds.truncate(n);
    }
    let cfg = EncryptConfig {
        client_id,
        epoch,
        p,
        side: size,
        n_fixed_bs: nbs,
        n_fixed_ps: nps,
        first_image_id: a.first_image_id,
    };
    let result = encrypt_dataset(&ds, &secret, &cfg, a.keys.is_some())?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let file = format!("client-{client_id:08}-epoch-{epoch:04}.pced");
    let bytes = result.shard.to_bytes();
    fs::write(a.out.join(&file), &bytes)?;
    let manifest = rebuild_manifest(&a.out, geometry)?;
    if let Some(path) = &a.keys {
        let path = &key_cache_path(path, true)?;
        let mut cache = if path.exists() { KeyCache::load(path)? } else { KeyCache::new() };
        cache.extend(result.keys);
        write_private(path, &cache.to_bytes())?;
    }

    #[derive(Serialize)]
    struct Summary {
        records: usize,
        shard: PathBuf,
        sha256: String,
        n_blocks: u32,
        l_vec: u32,
        p: usize,
        n_fixed_bs: u32,
        n_fixed_ps: u32,
        epoch: u32,
        client_id: u32,
        manifest_records: u64,
    }
    out.emit(
        &Summary {
            records: result.shard.records.len(),
            shard: a.out.join(&file),
            sha256: sha256_hex(&bytes),
            n_blocks: geometry.n_blocks,
            l_vec: geometry.l_vec,
            p,
            n_fixed_bs: nbs,
            n_fixed_ps: nps,
            epoch,
            client_id,
            manifest_records: manifest.total_records,
        },
        |s| {
            format!(
                "encrypted {} images -> {} (N={}, L={}, p={}, N_bs={}, N_ps={}, epoch {})",
                s.records,
                s.shard.display(),
                s.n_blocks,
                s.l_vec,
                s.p,
                s.n_fixed_bs,
                s.n_fixed_ps,
                s.epoch
            )
        },
    )
}

/// Lists every `.pced` file in `dir` in name order.
fn shard_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pced") && p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn rebuild_manifest(dir: &Path, geometry: ShardGeometry) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(geometry);
    for path in shard_files(dir)? {
        let name = path.file_name().expect("listed files have names").to_string_lossy().into_owned();
        manifest
            .add_shard(&name, &fs::read(&path)?)
            .with_context(|| format!("adding {name} to the manifest"))?;
    }
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn collect_shards(paths: &[PathBuf]) -> Result<Vec<(PathBuf, Shard)>> {
    let mut out = Vec::new();
    for p in paths {
        let files = if p.is_dir() { shard_files(p)? } else { vec![p.clone()] };
        for f in files {
            let shard = Shard::read_file(&f).with_context(|| format!("reading {}", f.display()))?;
            out.push((f, shard));
        }
    }
    Ok(out)
}

fn placeholder_model(manifest: &DatasetManifest) -> Result<Vec<u8>> {
    let mut blob = b"PERMCOLLAB-PLACEHOLDER-MODEL\n".to_vec();
    blob.extend_from_slice(sha256_hex(&serde_json::to_vec(manifest)?).as_bytes());
    blob.push(b'\n');
    Ok(blob)
}

fn serve(a: &ServeArgs, out: Output) -> Result<()> {
    if a.clients == 0 {
        return Err(usage("--clients must be at least 1"));
    }
    if a.chunk_size == 0 {
        return Err(usage("--chunk-size must be positive"));
    }
    let model = a
        .model
        .as_ref()
        .map(|p| fs::read(p).with_context(|| format!("reading model {}", p.display())))
        .transpose()?;
    let cfg = ServerConfig {
        model_chunk_size: a.chunk_size,
        ..ServerConfig::new(&a.out, a.clients)
    };
    let handle = serve_with(&a.listen, cfg).with_context(|| format!("binding {}", a.listen))?;

    #[derive(Serialize)]
    struct Listening {
        listening: String,
    }
    out.emit(&Listening { listening: handle.addr.to_string() }, |l| format!("listening on {}", l.listening))?;

    let manifest = loop {
        if let Some(m) = handle.server.wait_sealed(Duration::from_secs(3600)) {
            break m;
        }
    };
    let model = match model {
        Some(m) => m,
        None => placeholder_model(&manifest)?,
    };
    let model_len = model.len();
    handle.server.set_model(model);

    #[derive(Serialize)]
    struct Sealed {
        sealed: bool,
        total_records: u64,
        clients: usize,
        shards: usize,
        model_bytes: usize,
    }
    out.emit(
        &Sealed {
            sealed: true,
            total_records: manifest.total_records,
            clients: manifest.per_client.len(),
            shards: manifest.shards.len(),
            model_bytes: model_len,
        },
        |s| {
            format!(
                "sealed {} records from {} clients in {} shards; serving a {}-byte model",
                s.total_records, s.clients, s.shards, s.model_bytes
            )
        },
    )?;
    match a.linger_secs {
        Some(s) => thread::sleep(Duration::from_secs(s)),
        None => loop {
            thread::park();
        },
    }
    handle.shutdown();
    Ok(())
}

fn upload_cmd(a: &UploadArgs, out: Output) -> Result<()> {
    if a.batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    let shards: Vec<Shard> = collect_shards(&a.shards)?.into_iter().map(|(_, s)| s).collect();
    let client_id = match a.client_id {
        Some(c) => c,
        None => {
            let mut ids = shards.iter().flat_map(|s| s.records.iter().map(|r| r.client_id));
            let first = ids.next().ok_or_else(|| usage("shards are empty; pass --client-id"))?;
            if ids.any(|c| c != first) {
                return Err(usage("shards hold several clients; pass --client-id"));
            }
            first
        }
    };
    let connector = TcpConnector::new(a.connect);
    let opts = UploadOptions {
        records_per_batch: a.batch,
        max_retries: a.retries,
    };
    let summary = upload(&connector, &shards, client_id, opts).context("upload failed")?;
    out.emit(&summary, |s| {
        format!(
            "client {} uploaded {} records in {} batches ({} bytes, {} connection(s))",
            s.client_id, s.records, s.batches, s.bytes_sent, s.connections
        )
    })
}

fn fetch(a: &FetchArgs, out: Output) -> Result<()> {
    let bytes = fetch_model(&TcpConnector::new(a.connect), a.client_id).context("model download failed")?;
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;

    #[derive(Serialize)]
    struct Fetched {
        path: PathBuf,
        bytes: usize,
        sha256: String,
    }
    out.emit(
        &Fetched {
            path: a.out.clone(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        },
        |f| format!("{} bytes -> {} (sha256 {})", f.bytes, f.path.display(), f.sha256),
    )
}

fn verify(a: &VerifyArgs, out: Output) -> Result<()> {
    let path = key_cache_path(&a.keys, false)?;
    let keys = KeyCache::load(&path).with_context(|| format!("reading key cache {}", path.display()))?;
    let plain = a.plain.as_deref().map(|p| load_plain(p, a.split)).transpose()?;

    #[derive(Serialize, Default)]
    struct Report {
        records: u64,
        recovered: u64,
        missing_keys: u64,
        wrong_keys: u64,
        plain_compared: u64,
        plain_matches: u64,
        exact_fraction: f64,
    }
    let mut r = Report::default();
    for (path, shard) in collect_shards(std::slice::from_ref(&a.input))? {
        for rec in &shard.records {
            r.records += 1;
            let Some(key) = keys.get(&rec.id()) else {
                r.missing_keys += 1;
                continue;
            };
            let enc = rec
                .encrypted_image(&shard.geometry)
                .with_context(|| format!("record {} in {}", rec.image_id, path.display()))?;
            let Ok(x) = decrypt(&enc, key) else {
                r.wrong_keys += 1;
                continue;
            };
            // re-encrypting the recovered image must reproduce the record
            if encrypt_image(&x, key)?.image.data() != rec.payload.as_slice() {
                continue;
            }
            r.recovered += 1;
            if let Some(ds) = &plain {
                let Some(orig) = ds.images().get(rec.image_id as usize) else {
                    continue;
                };
                r.plain_compared += 1;
                let side = shard.geometry.h as usize;
                if resize(orig, side)? == x {
                    r.plain_matches += 1;
                }
            }
        }
    }
    let ok = r.records > 0 && r.recovered == r.records && r.plain_matches == r.plain_compared;
    let exact = if plain.is_some() { r.plain_matches } else { r.recovered };
    r.exact_fraction = if r.records == 0 { 0.0 } else { exact as f64 / r.records as f64 };
    out.emit(&r, |r| {
        let mut s = format!(
            "{}/{} records decrypted ({:.1}% bit-exact)",
            r.recovered,
            r.records,
            100.0 * r.exact_fraction
        );
        if r.missing_keys > 0 || r.wrong_keys > 0 {
            s.push_str(&format!("; {} without a key, {} with a wrong key", r.missing_keys, r.wrong_keys));
        }
        if plain.is_some() {
            s.push_str(&format!("; {}/{} match the plaintext", r.plain_matches, r.plain_compared));
        }
        s
    })?;
    if !ok {
        bail!("round trip incomplete");
    }
    Ok(())
}

fn export(a: &ExportArgs, out: Output) -> Result<()> {
    if a.size == Some(0) {
        return Err(usage("--size must be positive"));
    }
    let images: Vec<(String, ImageTensor)> = match (&a.shard, &a.cifar) {
        (Some(path), None) => {
            let shard = Shard::read_file(path).with_context(|| format!("reading {}", path.display()))?;
            shard
                .records
                .iter()
                .take(a.limit)
                .map(|r| {
                    let img = r.encrypted_image(&shard.geometry)?.image;
                    Ok((format!("client{}-img{}-epoch{}.png", r.client_id, r.image_id, r.epoch), img))
                })
                .collect::<Result<_>>()?
        }
        (None, Some(path)) => {
            let ds = read_cifar10_file(path).with_context(|| format!("reading {}", path.display()))?;
            ds.images()
                .iter()
                .take(a.limit)
                .enumerate()
                .map(|(i, img)| {
                    let img = match a.size {
                        Some(s) => resize(img, s)?,
                        None => img.clone(),
                    };
                    Ok((format!("plain-img{i}.png"), img))
                })
                .collect::<Result<_>>()?
        }
        _ => return Err(usage("pass exactly one of --shard or --cifar")),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written = Vec::new();
    for (name, img) in &images {
        let path = a.out.join(name);
        export_png(img, &path).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }

    #[derive(Serialize)]
    struct Exported {
        files: Vec<PathBuf>,
    }
    out.emit(&Exported { files: written }, |e| format!("wrote {} PNG files to {}", e.files.len(), a.out.display()))
}

fn embed_check(a: &EmbedArgs, out: Output) -> Result<()> {
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let reports = run_trials(&mut rng, a.trials)?;

    #[derive(Serialize)]
    struct Check<'a> {
        trials: usize,
        reports: &'a [permcollab::embed::VerificationReport; 2],
    }
    out.emit(&Check { trials: a.trials, reports: &reports }, |c| {
        c.reports
            .iter()
            .map(|r| {
                format!(
                    "{} {}: max deviation {:.2e} over {} trials (tolerance {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.identity,
                    r.max_deviation,
                    c.trials,
                    r.tolerance
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    if reports.iter().any(|r| !r.passed) {
        bail!("embedding identity check failed");
    }
    Ok(())
}

fn cost(a: &CostArgs, out: Output) -> Result<()> {
    let params = CostParams {
        m_clients: a.clients,
        images_per_client: a.images,
        bytes_per_image: a.image_bytes,
        model_bytes: a.model_bytes,
        fl_rounds: a.rounds,
        fl_participation: a.participation,
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    let r = cost_report(&params)?;
    out.emit(&r, |r| {
        let mut s = format!(
            "one-shot: {} B up + {} B model = {} B\nfederated: {} B up + {} B down = {} B ({} clients/round)\nregime: {:?}",
            r.one_shot.client_to_server,
            r.one_shot.server_to_client,
            r.one_shot_total_bytes,
            r.federated.client_to_server,
            r.federated.server_to_client,
            r.fl_total_bytes,
            r.fl_participants_per_round,
            r.regime
        );
        if let Some(x) = r.crossover_model_bytes {
            s.push_str(&format!("\none-shot is cheaper for models above {x:.0} B"));
        }
        s
    })
}
