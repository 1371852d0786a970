//! Training-record storage: a text header line followed by fixed-width
//! little-endian f32 record blocks.
//!
//! Every numeric field is stored as f32, including the episode and step
//! ids (exact below 2^24). States are quantized to f32 at generation time,
//! so serialization is lossless round-trip and recorded transitions replay
//! bit-identically.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::state::{Action, Observation, Pose, State, StateHistory, Twist};
use crate::{Error, Result};

const MAGIC: &str = "wrenchnet-dataset v1";

/// One training transition of the dynamic body.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub episode: u32,
    pub step: u32,
    /// `h + 1` pose frames, newest first.
    pub poses: Vec<Pose>,
    /// Twist at the newest frame.
    pub twist: Twist,
    pub action: Action,
    /// Reaction wrench sensed over the recorded step.
    pub observation: Observation,
    pub next_pose: Pose,
    pub next_twist: Twist,
}

impl Record {
    pub fn h(&self) -> usize {
        self.poses.len() - 1
    }

    /// Floats per serialized record for history length `h`.
    pub fn width(h: usize) -> usize {
        2 + 7 * (h + 1) + 6 + 6 + 6 + 7 + 6
    }

    /// The state at the newest recorded frame.
    pub fn state(&self) -> State {
        State {
            pose: self.poses[0],
            twist: self.twist,
        }
    }

    /// History window for graph building: the newest `h` frames plus the
    /// trailing pose. Only the newest frame's twist is recorded; older
    /// frames carry zero twists, which no feature reads.
    pub fn history(&self) -> Result<StateHistory> {
        let h = self.h();
        let frames = (0..h)
            .map(|k| State {
                pose: self.poses[k],
                twist: if k == 0 { self.twist } else { Twist::zero() },
            })
            .collect();
        StateHistory::new(frames, self.poses[h])
    }
}

/// In-memory dataset with the header fields that describe it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub dt: f64,
    pub scene_hash: u64,
    pub records: Vec<Record>,
}

fn push_pose(out: &mut Vec<f32>, p: &Pose) {
    out.extend_from_slice(&[
        p.position.x as f32,
        p.position.y as f32,
        p.position.z as f32,
        p.orientation.w as f32,
        p.orientation.i as f32,
        p.orientation.j as f32,
        p.orientation.k as f32,
    ]);
}

fn push_vec3(out: &mut Vec<f32>, v: &Vector3<f64>) {
    out.extend_from_slice(&[v.x as f32, v.y as f32, v.z as f32]);
}

/// Serializes one record into `row` in the fixed storage layout. Shared
/// with the episode-trace format, which appends a reward column per row.
pub(crate) fn encode_record(row: &mut Vec<f32>, r: &Record) {
    row.push(r.episode as f32);
    row.push(r.step as f32);
    for p in &r.poses {
        push_pose(row, p);
    }
    push_vec3(row, &r.twist.linear);
    push_vec3(row, &r.twist.angular);
    push_vec3(row, &r.action.force);
    push_vec3(row, &r.action.torque);
    push_vec3(row, &r.observation.force);
    push_vec3(row, &r.observation.torque);
    push_pose(row, &r.next_pose);
    push_vec3(row, &r.next_twist.linear);
    push_vec3(row, &r.next_twist.angular);
}

/// Decodes one record from exactly `Record::width(h)` floats.
pub(crate) fn decode_record(floats: &[f32], h: usize) -> Record {
    debug_assert_eq!(floats.len(), Record::width(h));
    let mut fr = FloatReader {
        data: floats,
        at: 0,
    };
    let ids = fr.take(2);
    let poses = (0..=h).map(|_| fr.pose()).collect();
    let twist = Twist {
        linear: fr.vec3(),
        angular: fr.vec3(),
    };
    let action = Action {
        force: fr.vec3(),
        torque: fr.vec3(),
    };
    let observation = Observation {
        force: fr.vec3(),
        torque: fr.vec3(),
    };
    let next_pose = fr.pose();
    let next_twist = Twist {
        linear: fr.vec3(),
        angular: fr.vec3(),
    };
    Record {
        episode: ids[0] as u32,
        step: ids[1] as u32,
        poses,
        twist,
        action,
        observation,
        next_pose,
        next_twist,
    }
}

struct FloatReader<'a> {
    data: &'a [f32],
    at: usize,
}

impl<'a> FloatReader<'a> {
    fn take(&mut self, n: usize) -> &'a [f32] {
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        s
    }

    /// Reconstructs the pose without renormalizing: the stored floats are
    /// authoritative so replay stays bit-exact.
    fn pose(&mut self) -> Pose {
        let f = self.take(7);
        Pose {
            position: Vector3::new(f[0] as f64, f[1] as f64, f[2] as f64),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(
                f[3] as f64,
                f[4] as f64,
                f[5] as f64,
                f[6] as f64,
            )),
        }
    }

    fn vec3(&mut self) -> Vector3<f64> {
        let f = self.take(3);
        Vector3::new(f[0] as f64, f[1] as f64, f[2] as f64)
    }
}

impl Dataset {
    pub fn new(h: usize, dt: f64, scene_hash: u64) -> Self {
        Self {
            h,
            dt,
            scene_hash,
            records: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.poses.len() != self.h + 1 {
                return Err(Error::Format(format!(
                    "record {i} has {} pose frames, expected {}",
                    r.poses.len(),
                    self.h + 1
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "{MAGIC} h={} dt={} scene={:016x} records={}",
            self.h,
            self.dt,
            self.scene_hash,
            self.records.len()
        )?;
        let mut row: Vec<f32> = Vec::with_capacity(Record::width(self.h));
        for r in &self.records {
            row.clear();
            encode_record(&mut row, r);
            debug_assert_eq!(row.len(), Record::width(self.h));
            for v in &row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("dataset header truncated".into()))?;
            if b[0] == b'\n' {
                break;
            }
            if header.len() > 4096 {
                return Err(Error::Format("dataset header unterminated".into()));
            }
            header.push(b[0]);
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::Format("dataset header is not UTF-8".into()))?;
        let rest = header
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Format(format!("not a dataset file: {header:?}")))?;
        let mut h = None;
        let mut dt = None;
        let mut scene_hash = None;
        let mut n_records = None;
        for tok in rest.split_whitespace() {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header token {tok:?}")))?;
            match key {
                "h" => h = Some(val.parse::<usize>().map_err(|e| bad(key, e))?),
                "dt" => dt = Some(val.parse::<f64>().map_err(|e| bad(key, e))?),
                "scene" => {
                    scene_hash =
                        Some(u64::from_str_radix(val, 16).map_err(|e| bad(key, e))?)
                }
                "records" => {
                    n_records = Some(val.parse::<usize>().map_err(|e| bad(key, e))?)
                }
                other => {
                    return Err(Error::Format(format!("unknown header key {other:?}")))
                }
            }
        }
        let h = h.ok_or_else(|| missing("h"))?;
        let dt = dt.ok_or_else(|| missing("dt"))?;
        let scene_hash = scene_hash.ok_or_else(|| missing("scene"))?;
        let n_records = n_records.ok_or_else(|| missing("records"))?;

        let width = Record::width(h);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n_records * width * 4 {
            return Err(Error::Format(format!(
                "dataset body holds {} bytes, expected {} ({} records of {} floats)",
                bytes.len(),
                n_records * width * 4,
                n_records,
                width
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let mut records = Vec::with_capacity(n_records);
        for i in 0..n_records {
            records.push(decode_record(&floats[i * width..(i + 1) * width], h));
        }
        let out = Self {
            h,
            dt,
            scene_hash,
            records,
        };
        out.validate()?;
        Ok(out)
    }
}

fn bad(key: &str, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("bad header value for {key}: {e}"))
}

fn missing(key: &str) -> Error {
    Error::Format(format!("dataset header missing {key}"))
}

/// Rounds a state to f32 precision (the storage grid), keeping the
/// orientation's stored components authoritative rather than renormalizing.
pub fn quantize_state(s: &State) -> State {
    let q32 = |v: f64| v as f32 as f64;
    let qv = |v: &Vector3<f64>| Vector3::new(q32(v.x), q32(v.y), q32(v.z));
    let q = s.pose.orientation;
    State {
        pose: Pose {
            position: qv(&s.pose.position),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(
                q32(q.w),
                q32(q.i),
                q32(q.j),
                q32(q.k),
            )),
        },
        twist: Twist {
            linear: qv(&s.twist.linear),
            angular: qv(&s.twist.angular),
        },
    }
}
