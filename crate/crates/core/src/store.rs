//! DRAM/flash hybrid storage.
//!
//! Flash is a real directory of files plus a simulated clock: every read is
//! charged to a [`TimingLedger`] at the configured bandwidths. Where bytes
//! live never changes what a read returns.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_DRAM_BANDWIDTH: f64 = 58e9;
pub const DEFAULT_FLASH_BANDWIDTH: f64 = 1e9;
pub const DEFAULT_FLASH_LATENCY: f64 = 15e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StorageConfig {
    /// bytes/s
    pub dram_bandwidth: f64,
    /// bytes/s
    pub flash_bandwidth: f64,
    /// seconds added to every flash read
    pub flash_latency: f64,
    /// Tokens per layer kept in DRAM; `None` keeps everything in DRAM.
    pub kv_dram_limit_tokens: Option<usize>,
    pub flash_dir: PathBuf,
    pub prefetch: bool,
    /// Compute span (s) a prefetch can hide behind. `None` until the runtime
    /// derives it from the per-layer parameter bytes.
    pub compute_window: Option<f64>,
}

impl StorageConfig {
    pub fn new(flash_dir: impl Into<PathBuf>) -> Self {
        Self {
            dram_bandwidth: DEFAULT_DRAM_BANDWIDTH,
            flash_bandwidth: DEFAULT_FLASH_BANDWIDTH,
            flash_latency: DEFAULT_FLASH_LATENCY,
            kv_dram_limit_tokens: None,
            flash_dir: flash_dir.into(),
            prefetch: true,
            compute_window: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.dram_bandwidth) || !ok(self.flash_bandwidth) {
            return Err(Error::BadArg("bandwidths must be positive".into()));
        }
        if !(self.flash_latency.is_finite() && self.flash_latency >= 0.0) {
            return Err(Error::BadArg("flash latency must be non-negative".into()));
        }
        if let Some(w) = self.compute_window {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::BadArg("compute window must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Simulated time of one flash read of `bytes`.
    pub fn flash_read_time(&self, bytes: usize) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        self.flash_latency + bytes as f64 / self.flash_bandwidth
    }

    pub fn dram_read_time(&self, bytes: usize) -> f64 {
        bytes as f64 / self.dram_bandwidth
    }
}

/// Per-layer compute window under the memory-bound decode model: the time
/// to stream one layer's parameters from DRAM.
pub fn default_compute_window(layer_param_bytes: u64, dram_bandwidth: f64) -> f64 {
    layer_param_bytes as f64 / dram_bandwidth
}

/// Simulated seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TimingLedger {
    pub compute: f64,
    pub dram_traffic: f64,
    pub flash_traffic: f64,
    pub hidden_by_prefetch: f64,
}

impl TimingLedger {
    /// Flash time not overlapped with compute.
    pub fn exposed_flash(&self) -> f64 {
        self.flash_traffic - self.hidden_by_prefetch
    }

    pub fn total(&self) -> f64 {
        self.compute + self.dram_traffic + self.exposed_flash()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHandle {
    pub rows: usize,
    pub row_bytes: usize,
}

/// Append-only record buffer split at a fixed byte offset: records below
/// `split_point` stay in memory, the rest go to a flash file.
#[derive(Debug)]
pub struct TieredBuffer {
    path: PathBuf,
    dram: Vec<u8>,
    split_point: Option<usize>,
    len: usize,
    file: File,
}

impl TieredBuffer {
    fn create(path: PathBuf, split_point: Option<usize>) -> Result<Self> {
        let file = OpenOptions::new().create(true).read(true).write(true).truncate(true).open(&path)?;
        Ok(Self { path, dram: Vec::new(), split_point, len: 0, file })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dram_len(&self) -> usize {
        self.dram.len()
    }

    pub fn flash_len(&self) -> usize {
        self.len - self.dram.len()
    }

    pub fn split_point(&self) -> Option<usize> {
        self.split_point
    }

    fn append(&mut self, bytes: &[u8]) -> Result<()> {
        let room = match self.split_point {
            None => bytes.len(),
            Some(s) => s.saturating_sub(self.len).min(bytes.len()),
        };
        // flash receives data only once DRAM is full, so a split never
        // leaves a hole in the DRAM prefix
        self.dram.extend_from_slice(&bytes[..room]);
        if room < bytes.len() {
            self.file.seek(SeekFrom::End(0))?;
            self.file.write_all(&bytes[room..])?;
        }
        self.len += bytes.len();
        Ok(())
    }

    /// Bytes of `range` split into (DRAM part, flash part) lengths.
    fn split(&self, range: &Range<usize>) -> (usize, usize) {
        let d = self.dram.len();
        let dram = range.end.min(d).saturating_sub(range.start.min(d));
        (dram, range.len() - dram)
    }

    fn read(&mut self, range: Range<usize>, out: &mut Vec<u8>) -> Result<()> {
        if range.end > self.len || range.start > range.end {
            return Err(Error::BadRange(format!("{range:?} outside buffer of {} bytes", self.len)));
        }
        let d = self.dram.len();
        if range.start < d {
            out.extend_from_slice(&self.dram[range.start..range.end.min(d)]);
        }
        if range.end > d {
            let start = range.start.max(d);
            read_flash(&mut self.file, (start - d) as u64, range.end - start, out)?;
        }
        Ok(())
    }
}

fn read_flash(file: &mut File, offset: u64, n: usize, out: &mut Vec<u8>) -> Result<()> {
    file.seek(SeekFrom::Start(offset))?;
    let at = out.len();
    out.resize(at + n, 0);
    file.read_exact(&mut out[at..])?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrefetchTicket(u64);

struct Pending {
    layer: usize,
    /// DRAM-resident head of the range, copied at issue time.
    head: Vec<u8>,
    flash_bytes: usize,
    reader: JoinHandle<std::io::Result<Vec<u8>>>,
}

/// One point of the decode-step latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub flash_kv_bytes: f64,
    /// the same bytes served from DRAM
    pub dram: f64,
    pub flash_no_prefetch: f64,
    pub flash_prefetch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub ledger: TimingLedger,
    pub exposed_flash: f64,
    pub compute_window: f64,
    pub hideable_bytes: f64,
    pub curve: Vec<CurvePoint>,
}

/// Per-layer decode-step latency with `flash_bytes` of KV history in flash,
/// on top of a `base` compute time equal to the window.
pub fn latency_point(cfg: &StorageConfig, window: f64, flash_bytes: f64) -> CurvePoint {
    let fetch = if flash_bytes > 0.0 { cfg.flash_latency + flash_bytes / cfg.flash_bandwidth } else { 0.0 };
    CurvePoint {
        flash_kv_bytes: flash_bytes,
        dram: window + flash_bytes / cfg.dram_bandwidth,
        flash_no_prefetch: window + fetch,
        flash_prefetch: window + (fetch - window).max(0.0),
    }
}

pub fn latency_curve(cfg: &StorageConfig, window: f64, points: &[f64]) -> Vec<CurvePoint> {
    points.iter().map(|&b| latency_point(cfg, window, b)).collect()
}

/// Flash bytes a prefetch can fully hide behind `window` seconds of compute.
pub fn hideable_bytes(cfg: &StorageConfig, window: f64) -> f64 {
    ((window - cfg.flash_latency) * cfg.flash_bandwidth).max(0.0)
}

pub struct Store {
    cfg: StorageConfig,
    ledger: TimingLedger,
    dram_resident: u64,
    embedding: Option<(EmbeddingHandle, File)>,
    kv: HashMap<usize, TieredBuffer>,
    pending: HashMap<PrefetchTicket, Pending>,
    next_ticket: u64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("cfg", &self.cfg)
            .field("ledger", &self.ledger)
            .field("dram_resident", &self.dram_resident)
            .field("in_flight", &self.pending.len())
            .finish()
    }
}

pub fn open_store(cfg: StorageConfig) -> Result<Store> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.flash_dir)?;
    // probe writability up front
    let probe = cfg.flash_dir.join(".probe");
    File::create(&probe)?;
    fs::remove_file(&probe)?;
    Ok(Store {
        cfg,
        ledger: TimingLedger::default(),
        dram_resident: 0,
        embedding: None,
        kv: HashMap::new(),
        pending: HashMap::new(),
        next_ticket: 0,
    })
}

impl Store {
    pub fn config(&self) -> &StorageConfig {
        &self.cfg
    }

    pub fn flash_dir(&self) -> &Path {
        &self.cfg.flash_dir
    }

    pub fn ledger(&self) -> TimingLedger {
        self.ledger
    }

    pub fn reset_ledger(&mut self) {
        self.ledger = TimingLedger::default();
    }

    pub fn add_compute(&mut self, seconds: f64) {
        self.ledger.compute += seconds;
    }

    /// Charge a read of `bytes` held in DRAM outside the store.
    pub fn charge_dram_read(&mut self, bytes: usize) {
        self.ledger.dram_traffic += self.cfg.dram_read_time(bytes);
    }

    pub fn set_compute_window(&mut self, seconds: f64) {
        self.cfg.compute_window = Some(seconds);
    }

    pub fn compute_window(&self) -> f64 {
        self.cfg.compute_window.unwrap_or(0.0)
    }

    pub fn dram_resident_bytes(&self) -> u64 {
        self.dram_resident
    }

    /// Account for bytes the caller keeps in memory (weights, tables).
    pub fn add_dram_resident(&mut self, bytes: u64) {
        self.dram_resident += bytes;
    }

    /// Write the embedding table to `emb.bin`. Nothing is counted as DRAM.
    pub fn put_embedding_table(&mut self, rows: usize, row_bytes: usize, source: &[u8]) -> Result<EmbeddingHandle> {
        if rows == 0 || row_bytes == 0 || source.len() != rows * row_bytes {
            return Err(Error::BadSize(format!(
                "{} bytes given for {rows} rows of {row_bytes} bytes",
                source.len()
            )));
        }
        let path = self.cfg.flash_dir.join("emb.bin");
        let mut file = OpenOptions::new().create(true).read(true).write(true).truncate(true).open(path)?;
        file.write_all(source)?;
        file.flush()?;
        let handle = EmbeddingHandle { rows, row_bytes };
        self.embedding = Some((handle, file));
        Ok(handle)
    }

    pub fn read_embedding_row(&mut self, h: &EmbeddingHandle, token: usize) -> Result<Vec<u8>> {
        if token >= h.rows {
            return Err(Error::BadToken(format!("token {token} outside table of {}", h.rows)));
        }
        let (stored, file) = self
            .embedding
            .as_mut()
            .filter(|(s, _)| s == h)
            .ok_or_else(|| Error::BadArg("embedding handle does not belong to this store".into()))?;
        let mut out = Vec::with_capacity(stored.row_bytes);
        read_flash(file, (token * stored.row_bytes) as u64, stored.row_bytes, &mut out)?;
        self.ledger.flash_traffic += self.cfg.flash_read_time(h.row_bytes);
        Ok(out)
    }

    /// Create (or truncate) the KV buffer of `layer` holding fixed-size
    /// `record_bytes` records.
    pub fn create_kv_layer(&mut self, layer: usize, record_bytes: usize) -> Result<()> {
        if let Some(old) = self.kv.get(&layer) {
            self.dram_resident -= old.dram_len() as u64;
        }
        let split = self.cfg.kv_dram_limit_tokens.map(|t| t * record_bytes);
        let path = self.cfg.flash_dir.join(format!("kv_L{layer}.bin"));
        self.kv.insert(layer, TieredBuffer::create(path, split)?);
        Ok(())
    }

    pub fn kv_buffer(&self, layer: usize) -> Option<&TieredBuffer> {
        self.kv.get(&layer)
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut TieredBuffer> {
        self.kv.get_mut(&layer).ok_or_else(|| Error::BadArg(format!("no KV buffer for layer {layer}")))
    }

    /// Append one token's key and value bytes.
    pub fn kv_append(&mut self, layer: usize, k_bytes: &[u8], v_bytes: &[u8]) -> Result<()> {
        let buf = self.layer_mut(layer)?;
        let before = buf.dram_len();
        buf.append(k_bytes)?;
        buf.append(v_bytes)?;
        let grown = (buf.dram_len() - before) as u64;
        self.dram_resident += grown;
        Ok(())
    }

    /// Read bytes `range` of a layer's KV buffer, charging DRAM and flash time.
    pub fn kv_read(&mut self, layer: usize, range: Range<usize>) -> Result<Vec<u8>> {
        let cfg = self.cfg.clone();
        let buf = self.layer_mut(layer)?;
        let (dram, flash) = buf.split(&range);
        let mut out = Vec::with_capacity(range.len());
        buf.read(range, &mut out)?;
        self.ledger.dram_traffic += cfg.dram_read_time(dram);
        self.ledger.flash_traffic += cfg.flash_read_time(flash);
        Ok(out)
    }

    /// Start reading `range` of a layer's KV bytes in the background.
    pub fn prefetch_kv(&mut self, layer: usize, range: Range<usize>) -> Result<PrefetchTicket> {
        if self.pending.values().any(|p| p.layer == layer) {
            return Err(Error::BadArg(format!("a prefetch of layer {layer} is already in flight")));
        }
        let buf = self.layer_mut(layer)?;
        if range.end > buf.len() || range.start > range.end {
            return Err(Error::BadRange(format!("{range:?} outside buffer of {} bytes", buf.len())));
        }
        let d = buf.dram_len();
        let head = buf.dram[range.start.min(d)..range.end.min(d)].to_vec();
        let flash_start = range.start.max(d);
        let flash_bytes = range.end.saturating_sub(flash_start);
        let path = buf.path.clone();
        let offset = (flash_start - d) as u64;
        let reader = std::thread::spawn(move || {
            let mut out = Vec::with_capacity(flash_bytes);
            if flash_bytes > 0 {
                let mut f = File::open(path)?;
                f.seek(SeekFrom::Start(offset))?;
                out.resize(flash_bytes, 0);
                f.read_exact(&mut out)?;
            }
            Ok(out)
        });
        self.ledger.dram_traffic += self.cfg.dram_read_time(head.len());
        let ticket = PrefetchTicket(self.next_ticket);
        self.next_ticket += 1;
        self.pending.insert(ticket, Pending { layer, head, flash_bytes, reader });
        Ok(ticket)
    }

    /// Collect a prefetch after `compute_span` seconds of overlapping compute.
    pub fn await_prefetch(&mut self, ticket: PrefetchTicket, compute_span: f64) -> Result<Vec<u8>> {
        let p = self.pending.remove(&ticket).ok_or_else(|| Error::BadTicket(format!("unknown ticket {}", ticket.0)))?;
        let tail = p
            .reader
            .join()
            .map_err(|_| Error::Io(std::io::Error::other("prefetch reader panicked")))??;
        let duration = self.cfg.flash_read_time(p.flash_bytes);
        self.ledger.flash_traffic += duration;
        self.ledger.hidden_by_prefetch += duration.min(compute_span.max(0.0));
        let mut out = p.head;
        out.extend(tail);
        Ok(out)
    }

    /// Ledger snapshot plus the latency model sampled from 0 to 8 MB of
    /// flash-resident KV per layer.
    pub fn timing_report(&self) -> TimingReport {
        let window = self.compute_window();
        let points: Vec<f64> = (0..=32).map(|i| i as f64 * 0.25e6).collect();
        TimingReport {
            ledger: self.ledger,
            exposed_flash: self.ledger.exposed_flash(),
            compute_window: window,
            hideable_bytes: hideable_bytes(&self.cfg, window),
            curve: latency_curve(&self.cfg, window, &points),
        }
    }
}

pub fn timing_report(store: &Store) -> TimingReport {
    store.timing_report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_in(dir: &Path, limit: Option<usize>) -> Store {
        let mut cfg = StorageConfig::new(dir);
        cfg.kv_dram_limit_tokens = limit;
        open_store(cfg).unwrap()
    }

    #[test]
    fn fresh_store() {
        let dir = tempfile::tempdir().unwrap();
        let s = store_in(dir.path(), None);
        assert_eq!(s.ledger(), TimingLedger::default());
        assert_eq!(s.dram_resident_bytes(), 0);
        let cfg = s.config();
        assert_eq!((cfg.dram_bandwidth, cfg.flash_bandwidth, cfg.flash_latency), (58e9, 1e9, 15e-6));
    }

    #[test]
    fn unwritable_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        File::create(&file).unwrap();
        let err = open_store(StorageConfig::new(file.join("sub"))).unwrap_err();
        assert_eq!(err.code(), "io-error");
    }

    #[test]
    fn reopen_reuses_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store_in(dir.path(), Some(0));
        s.create_kv_layer(0, 2).unwrap();
        s.kv_append(0, &[1], &[2]).unwrap();
        drop(s);
        let mut s = store_in(dir.path(), Some(0));
        s.create_kv_layer(0, 2).unwrap();
        s.kv_append(0, &[3], &[4]).unwrap();
        assert_eq!(s.kv_read(0, 0..2).unwrap(), vec![3, 4]);
        assert_eq!(fs::read(dir.path().join("kv_L0.bin")).unwrap(), vec![3, 4]);
    }

    #[test]
    fn embedding_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store_in(dir.path(), None);
        let table: Vec<u8> = (0..256 * 16).map(|i| (i * 7 % 251) as u8).collect();
        let h = s.put_embedding_table(256, 16, &table).unwrap();
        assert_eq!(s.dram_resident_bytes(), 0);
        assert_eq!(s.read_embedding_row(&h, 0).unwrap(), table[..16]);
        assert_eq!(s.read_embedding_row(&h, 255).unwrap(), table[255 * 16..]);
        assert_eq!(s.read_embedding_row(&h, 256).unwrap_err().code(), "bad-token");
        assert_eq!(s.put_embedding_table(256, 16, &table[1..]).unwrap_err().code(), "bad-size");
    }

    #[test]
    fn embedding_read_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store_in(dir.path(), None);
        let h = s.put_embedding_table(3, 7168, &vec![0u8; 3 * 7168]).unwrap();
        s.read_embedding_row(&h, 1).unwrap();
        let one = s.ledger().flash_traffic;
        assert!((one - (15e-6 + 7.168e-6)).abs() < 1e-12);
        for _ in 0..99 {
            s.read_embedding_row(&h, 2).unwrap();
        }
        assert!((s.ledger().flash_traffic - 100.0 * one).abs() < 1e-12);
    }

    #[test]
    fn kv_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store_in(dir.path(), Some(4));
        s.create_kv_layer(0, 4).unwrap();
        for t in 0..5u8 {
            s.kv_append(0, &[t, t], &[t + 100, t + 100]).unwrap();
        }
        let b = s.kv_buffer(0).unwrap();
        assert_eq!(b.dram_len(), 16);
        assert_eq!(b.flash_len(), 4);
        assert_eq!(s.dram_resident_bytes(), 16);
        assert_eq!(s.kv_read(0, 14..20).unwrap(), vec![103, 103, 4, 4, 104, 104]);
    }

    #[test]
    fn qwen_shape_record_is_1k() {
        let layout = crate::kernels::KvLayout { kv_heads: 4, head_dim: 128, key_bits: crate::quantize::QuantBits::Int8 };
        // codes only; the per-head key params add 8 bytes each
        assert_eq!(layout.kv_heads * layout.key_code_bytes() + layout.value_bytes(), 1024);
        assert_eq!(layout.record_bytes(), 1024 + 4 * 8);
    }

    #[test]
    fn prefetch_returns_same_bytes_and_hides() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store_in(dir.path(), Some(2));
        s.create_kv_layer(1, 8).unwrap();
        for t in 0..6u8 {
            s.kv_append(1, &[t; 4], &[t + 50; 4]).unwrap();
        }
        let direct = s.kv_read(1, 4..48).unwrap();
        let before = s.ledger();
        let ticket = s.prefetch_kv(1, 4..48).unwrap();
        assert!(s.prefetch_kv(1, 0..8).is_err());
        let fetched = s.await_prefetch(ticket, 1.0).unwrap();
        assert_eq!(fetched, direct);
        let after = s.ledger();
        let dur = s.config().flash_read_time(32);
        assert!((after.flash_traffic - before.flash_traffic - dur).abs() < 1e-15);
        assert!((after.hidden_by_prefetch - dur).abs() < 1e-15);
        assert_eq!(s.await_prefetch(ticket, 1.0).unwrap_err().code(), "bad-ticket");
    }

    #[test]
    fn partial_hiding() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store_in(dir.path(), Some(0));
        s.create_kv_layer(0, 1000).unwrap();
        s.kv_append(0, &vec![1u8; 500], &vec![2u8; 500]).unwrap();
        let t = s.prefetch_kv(0, 0..1000).unwrap();
        s.await_prefetch(t, 5e-6).unwrap();
        let l = s.ledger();
        assert!((l.hidden_by_prefetch - 5e-6).abs() < 1e-15);
        assert!((l.exposed_flash() - (15e-6 + 1e-6 - 5e-6)).abs() < 1e-12);
    }

    #[test]
    fn curve_regimes() {
        let cfg = StorageConfig::new("/unused");
        let window = 3e-3;
        assert!((hideable_bytes(&cfg, window) - 2.985e6).abs() < 1.0);
        let zero = latency_point(&cfg, window, 0.0);
        assert_eq!((zero.dram, zero.flash_no_prefetch, zero.flash_prefetch), (window, window, window));
        let a = latency_point(&cfg, window, 1e6);
        let b = latency_point(&cfg, window, 2e6);
        assert!(((b.flash_no_prefetch - a.flash_no_prefetch) - 1e-3).abs() < 1e-12);
        assert_eq!(a.flash_prefetch, window);
        assert_eq!(b.flash_prefetch, window);
        let c = latency_point(&cfg, window, 5e6);
        let d = latency_point(&cfg, window, 6e6);
        assert!(((d.flash_prefetch - c.flash_prefetch) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn qwen_window_near_3ms() {
        // one layer at int4 with an (f32 scale, f32 min) pair per 32 weights
        let params: u64 = 233_053_184;
        let bytes = params * 3 / 4;
        let w = default_compute_window(bytes, DEFAULT_DRAM_BANDWIDTH);
        assert!((w - 3e-3).abs() / 3e-3 < 0.2, "{w}");
    }

    proptest! {
        #[test]
        fn tiering_is_transparent(limit in 0usize..8, n in 1usize..12, lo in 0usize..12, hi in 0usize..12) {
            let rec = 3;
            let dir = tempfile::tempdir().unwrap();
            let mut tiered = store_in(dir.path(), Some(limit));
            let dir2 = tempfile::tempdir().unwrap();
            let mut flat = store_in(dir2.path(), None);
            for s in [&mut tiered, &mut flat] {
                s.create_kv_layer(0, rec).unwrap();
                for t in 0..n {
                    let b = (t * 13) as u8;
                    s.kv_append(0, &[b, b + 1], &[b + 2]).unwrap();
                }
            }
            let (lo, hi) = (lo.min(hi).min(n) * rec, lo.max(hi).min(n) * rec);
            prop_assert_eq!(tiered.kv_read(0, lo..hi).unwrap(), flat.kv_read(0, lo..hi).unwrap());
            let l = tiered.ledger();
            prop_assert!(l.exposed_flash() >= 0.0);
        }
    }
}
