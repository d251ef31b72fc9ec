//! Binary corpus file.
//!
//! ```text
//! magic      8 bytes  "UAVNCORP"
//! version    u32
//! header     u32 length + UTF-8 JSON (CorpusHeader)
//! digest     32 bytes SHA-256 of the payload
//! payload    u64 length + bytes
//! ```
//!
//! All integers are little-endian; strings are a u32 byte length followed by
//! UTF-8. The payload holds, in order:
//!
//! - frames: u32 count, then per frame u32 size, u32 channels, f64 altitude,
//!   u32 non-zero count and that many (u32 index, f64 value) pairs;
//! - trajectories: u32 count, then per trajectory a u32 record length and the record;
//! - samples: u32 count, then per sample a u32 record length and the record
//!   (frames are referenced by index, each frame is stored once);
//! - u64 relabeled count.

use std::collections::HashMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{Corpus, CorpusHeader, DatasetError, Split, TrajectoryRecord, TrajectorySample, FRAMES};
use crate::geometry::DiscreteAction;
use crate::simulator::{ExpertTrajectory, Observation, Pose64, Vec3d};
use crate::Waypoint64;

pub const CORPUS_MAGIC: &[u8; 8] = b"UAVNCORP";
pub const CORPUS_VERSION: u32 = 1;

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LE>(s.len() as u32).unwrap();
    w.extend_from_slice(s.as_bytes());
}

fn put_opt(w: &mut Vec<u8>, s: &Option<String>) {
    match s {
        Some(s) => {
            w.push(1);
            put_str(w, s);
        }
        None => w.push(0),
    }
}

fn put_vec3(w: &mut Vec<u8>, v: &Vec3d) {
    for c in [v.x, v.y, v.z] {
        w.write_f64::<LE>(c).unwrap();
    }
}

fn put_record(w: &mut Vec<u8>, rec: &[u8]) {
    w.write_u32::<LE>(rec.len() as u32).unwrap();
    w.extend_from_slice(rec);
}

fn encode_trajectory(t: &TrajectoryRecord) -> Vec<u8> {
    let mut w = Vec::new();
    let e = &t.expert;
    w.write_u32::<LE>(t.id).unwrap();
    w.push(t.split.code());
    w.write_u64::<LE>(t.template_seed).unwrap();
    w.write_u64::<LE>(e.world_seed).unwrap();
    put_str(&mut w, &e.instruction);
    w.write_u32::<LE>(e.poses.len() as u32).unwrap();
    for p in &e.poses {
        put_vec3(&mut w, &p.position);
        w.write_f64::<LE>(p.heading).unwrap();
    }
    w.write_u32::<LE>(e.actions.len() as u32).unwrap();
    w.extend(e.actions.iter().map(|a| a.index() as u8));
    put_vec3(&mut w, &e.goal);
    put_opt(&mut w, &e.goal_landmark);
    w.write_u32::<LE>(e.visible_landmarks.len() as u32).unwrap();
    for l in &e.visible_landmarks {
        put_opt(&mut w, l);
    }
    for pts in [&e.route, &e.targets] {
        w.write_u32::<LE>(pts.len() as u32).unwrap();
        for p in pts {
            put_vec3(&mut w, p);
        }
    }
    w
}

fn encode_sample(s: &TrajectorySample, frame_ids: &[u32; FRAMES]) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_u64::<LE>(s.id).unwrap();
    w.write_u32::<LE>(s.trajectory).unwrap();
    w.write_u32::<LE>(s.step).unwrap();
    put_str(&mut w, &s.instruction);
    for &f in frame_ids {
        w.write_u32::<LE>(f).unwrap();
    }
    w.extend(s.history_actions.iter().map(|a| a.index() as u8));
    put_str(&mut w, &s.cot);
    w.push(s.action_label.index() as u8);
    w.push(s.raw_label.index() as u8);
    for wp in &s.future_waypoints {
        for c in wp.components() {
            w.write_f64::<LE>(c).unwrap();
        }
    }
    w.write_u32::<LE>(s.stage_index as u32).unwrap();
    w.write_u32::<LE>(s.stage_count as u32).unwrap();
    put_str(&mut w, &s.landmark);
    w
}

/// Serializes a corpus to bytes.
pub fn corpus_to_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut frames: Vec<&Arc<Observation>> = Vec::new();
    let mut index: HashMap<*const Observation, u32> = HashMap::new();
    let mut sample_frames = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let ids: [u32; FRAMES] = std::array::from_fn(|k| {
            let f = &s.frames[k];
            *index.entry(Arc::as_ptr(f)).or_insert_with(|| {
                frames.push(f);
                frames.len() as u32 - 1
            })
        });
        sample_frames.push(ids);
    }

    let mut p = Vec::new();
    p.write_u32::<LE>(frames.len() as u32).unwrap();
    for f in &frames {
        p.write_u32::<LE>(f.size as u32).unwrap();
        p.write_u32::<LE>(f.channels as u32).unwrap();
        p.write_f64::<LE>(f.altitude).unwrap();
        let nz: Vec<(usize, f64)> = f.data.iter().copied().enumerate().filter(|(_, v)| v.to_bits() != 0).collect();
        p.write_u32::<LE>(nz.len() as u32).unwrap();
        for (i, v) in nz {
            p.write_u32::<LE>(i as u32).unwrap();
            p.write_f64::<LE>(v).unwrap();
        }
    }
    p.write_u32::<LE>(corpus.trajectories.len() as u32).unwrap();
    for t in &corpus.trajectories {
        put_record(&mut p, &encode_trajectory(t));
    }
    p.write_u32::<LE>(corpus.samples.len() as u32).unwrap();
    for (s, ids) in corpus.samples.iter().zip(&sample_frames) {
        put_record(&mut p, &encode_sample(s, ids));
    }
    p.write_u64::<LE>(corpus.relabeled as u64).unwrap();

    let header = serde_json::to_vec(&corpus.header).expect("header serializes");
    let mut out = Vec::with_capacity(p.len() + header.len() + 64);
    out.extend_from_slice(CORPUS_MAGIC);
    out.write_u32::<LE>(CORPUS_VERSION).unwrap();
    out.write_u32::<LE>(header.len() as u32).unwrap();
    out.extend_from_slice(&header);
    out.extend_from_slice(&Sha256::digest(&p));
    out.write_u64::<LE>(p.len() as u64).unwrap();
    out.extend_from_slice(&p);
    out
}

/// Reader that reports failures with absolute byte offsets.
struct Src<'a> {
    cur: Cursor<&'a [u8]>,
    base: u64,
}

impl<'a> Src<'a> {
    fn new(bytes: &'a [u8], base: u64) -> Self {
        Self {
            cur: Cursor::new(bytes),
            base,
        }
    }

    fn offset(&self) -> u64 {
        self.base + self.cur.position()
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, DatasetError> {
        Err(DatasetError::Format {
            offset: self.offset(),
            reason: reason.into(),
        })
    }

    fn eof(&self, what: &str) -> DatasetError {
        DatasetError::Format {
            offset: self.offset(),
            reason: format!("truncated while reading {what}"),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, DatasetError> {
        self.cur.read_u8().map_err(|_| self.eof(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DatasetError> {
        self.cur.read_u32::<LE>().map_err(|_| self.eof(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DatasetError> {
        self.cur.read_u64::<LE>().map_err(|_| self.eof(what))
    }

    fn f64(&mut self, what: &str) -> Result<f64, DatasetError> {
        self.cur.read_f64::<LE>().map_err(|_| self.eof(what))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        let start = self.cur.position() as usize;
        let all = *self.cur.get_ref();
        if all.len() - start < n {
            return Err(self.eof(what));
        }
        self.cur.set_position((start + n) as u64);
        Ok(&all[start..start + n])
    }

    fn string(&mut self, what: &str) -> Result<String, DatasetError> {
        let n = self.u32(what)? as usize;
        let at = self.offset();
        let b = self.bytes(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| DatasetError::Format {
            offset: at,
            reason: format!("{what} is not UTF-8"),
        })
    }

    fn opt_string(&mut self, what: &str) -> Result<Option<String>, DatasetError> {
        match self.u8(what)? {
            0 => Ok(None),
            1 => self.string(what).map(Some),
            _ => self.fail(format!("bad option tag in {what}")),
        }
    }

    fn action(&mut self, what: &str) -> Result<DiscreteAction, DatasetError> {
        let c = self.u8(what)?;
        match DiscreteAction::from_index(c as usize) {
            Some(a) => Ok(a),
            None => self.fail(format!("bad action code {c} in {what}")),
        }
    }

    fn vec3(&mut self, what: &str) -> Result<Vec3d, DatasetError> {
        Ok(Vec3d::new(self.f64(what)?, self.f64(what)?, self.f64(what)?))
    }

    fn count(&mut self, what: &str, min_item_bytes: usize) -> Result<usize, DatasetError> {
        let n = self.u32(what)? as usize;
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if n.saturating_mul(min_item_bytes) > left {
            return self.fail(format!("{what} count {n} exceeds remaining bytes"));
        }
        Ok(n)
    }

    /// Sub-reader over a length-prefixed record.
    fn record(&mut self, what: &str) -> Result<Src<'a>, DatasetError> {
        let n = self.u32(what)? as usize;
        let base = self.offset();
        Ok(Src::new(self.bytes(n, what)?, base))
    }

    fn finish(&self, what: &str) -> Result<(), DatasetError> {
        if (self.cur.position() as usize) != self.cur.get_ref().len() {
            return self.fail(format!("trailing bytes in {what}"));
        }
        Ok(())
    }
}

fn decode_trajectory(mut r: Src<'_>) -> Result<TrajectoryRecord, DatasetError> {
    let id = r.u32("trajectory id")?;
    let code = r.u8("split")?;
    let split = match Split::from_code(code) {
        Some(s) => s,
        None => return r.fail(format!("bad split code {code}")),
    };
    let template_seed = r.u64("template seed")?;
    let world_seed = r.u64("world seed")?;
    let instruction = r.string("instruction")?;
    let n = r.count("poses", 32)?;
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let position = r.vec3("pose")?;
        let heading = r.f64("heading")?;
        poses.push(Pose64 { position, heading });
    }
    let n = r.count("actions", 1)?;
    let actions = (0..n).map(|_| r.action("trajectory action")).collect::<Result<_, _>>()?;
    let goal = r.vec3("goal")?;
    let goal_landmark = r.opt_string("goal landmark")?;
    let n = r.count("visible landmarks", 1)?;
    let visible_landmarks = (0..n).map(|_| r.opt_string("visible landmark")).collect::<Result<_, _>>()?;
    let mut lists = Vec::new();
    for what in ["route", "targets"] {
        let n = r.count(what, 24)?;
        lists.push((0..n).map(|_| r.vec3(what)).collect::<Result<Vec<_>, _>>()?);
    }
    r.finish("trajectory record")?;
    let targets = lists.pop().unwrap();
    let route = lists.pop().unwrap();
    Ok(TrajectoryRecord {
        id,
        split,
        template_seed,
        expert: ExpertTrajectory {
            world_seed,
            instruction,
            poses,
            actions,
            goal,
            goal_landmark,
            visible_landmarks,
            route,
            targets,
        },
    })
}

fn decode_sample(mut r: Src<'_>, frames: &[Arc<Observation>]) -> Result<TrajectorySample, DatasetError> {
    let id = r.u64("sample id")?;
    let trajectory = r.u32("sample trajectory")?;
    let step = r.u32("sample step")?;
    let instruction = r.string("sample instruction")?;
    let mut fs = Vec::with_capacity(FRAMES);
    for _ in 0..FRAMES {
        let i = r.u32("frame index")? as usize;
        match frames.get(i) {
            Some(f) => fs.push(f.clone()),
            None => return r.fail(format!("frame index {i} out of range")),
        }
    }
    let mut history = [DiscreteAction::Straight; 3];
    for h in history.iter_mut() {
        *h = r.action("history action")?;
    }
    let cot = r.string("rationale")?;
    let action_label = r.action("action label")?;
    let raw_label = r.action("raw label")?;
    let mut wps = [Waypoint64::origin(); 3];
    for wp in wps.iter_mut() {
        *wp = Waypoint64 {
            x: r.f64("waypoint")?,
            y: r.f64("waypoint")?,
            z: r.f64("waypoint")?,
            yaw: r.f64("waypoint")?,
        };
    }
    let stage_index = r.u32("stage")? as usize;
    let stage_count = r.u32("stage count")? as usize;
    let landmark = r.string("landmark")?;
    r.finish("sample record")?;
    Ok(TrajectorySample {
        id,
        trajectory,
        step,
        instruction,
        frames: fs,
        history_actions: history,
        cot,
        action_label,
        raw_label,
        future_waypoints: wps,
        stage_index,
        stage_count,
        landmark,
    })
}

/// Parses bytes produced by [`corpus_to_bytes`], verifying the payload digest.
pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Corpus, DatasetError> {
    let mut r = Src::new(bytes, 0);
    if r.bytes(8, "magic")? != CORPUS_MAGIC {
        return r.fail("not a corpus file (bad magic)");
    }
    let version = r.u32("version")?;
    if version != CORPUS_VERSION {
        return r.fail(format!("unsupported corpus version {version}"));
    }
    let hlen = r.u32("header length")? as usize;
    let hat = r.offset();
    let header: CorpusHeader = serde_json::from_slice(r.bytes(hlen, "header")?).map_err(|e| DatasetError::Format {
        offset: hat,
        reason: format!("bad header: {e}"),
    })?;
    let digest = r.bytes(32, "digest")?.to_vec();
    let plen = r.u64("payload length")? as usize;
    let pat = r.offset();
    let payload = r.bytes(plen, "payload")?;
    r.finish("file")?;
    if Sha256::digest(payload).as_slice() != digest.as_slice() {
        return Err(DatasetError::Format {
            offset: pat,
            reason: "payload digest mismatch".into(),
        });
    }

    let mut p = Src::new(payload, pat);
    let n = p.count("frames", 20)?;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let size = p.u32("frame size")? as usize;
        let channels = p.u32("frame channels")? as usize;
        let altitude = p.f64("altitude")?;
        let mut obs = Observation::zeros(size, channels);
        obs.altitude = altitude;
        let nz = p.count("frame entries", 12)?;
        for _ in 0..nz {
            let i = p.u32("entry index")? as usize;
            let v = p.f64("entry value")?;
            match obs.data.get_mut(i) {
                Some(slot) => *slot = v,
                None => return p.fail(format!("entry index {i} out of range")),
            }
        }
        frames.push(Arc::new(obs));
    }
    let n = p.count("trajectories", 4)?;
    let trajectories = (0..n)
        .map(|_| decode_trajectory(p.record("trajectory")?))
        .collect::<Result<Vec<_>, _>>()?;
    let n = p.count("samples", 4)?;
    let samples = (0..n)
        .map(|_| decode_sample(p.record("sample")?, &frames))
        .collect::<Result<Vec<_>, _>>()?;
    let relabeled = p.u64("relabeled count")? as usize;
    p.finish("payload")?;
    let corpus = Corpus {
        header,
        trajectories,
        samples,
        relabeled,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), DatasetError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&corpus_to_bytes(corpus))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus, DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    corpus_from_bytes(&bytes)
}
