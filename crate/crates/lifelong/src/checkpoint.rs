//! Self-describing binary checkpoint container: magic, version, kind tag,
//! config echo, then named parameter stores with shapes. Round-trips are
//! bit-exact (f64 little-endian payloads).

use std::fmt;
use std::path::Path;

use diffcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LFLGCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    BadMagic,
    BadVersion(u32),
    Truncated,
    Malformed(String),
    Io(std::io::Error),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a checkpoint (bad magic)"),
            CheckpointError::BadVersion(v) => write!(f, "unsupported checkpoint version {}", v),
            CheckpointError::Truncated => write!(f, "checkpoint ends prematurely"),
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint: {}", m),
            CheckpointError::Io(e) => write!(f, "checkpoint io: {}", e),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// One checkpoint: a kind tag ("student", "teacher", "teacher-snapshot"),
/// the run's config echoed verbatim, and named parameter stores.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config_echo: String,
    pub stores: Vec<(String, ParamStore)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| CheckpointError::Malformed("non-utf8 string".into()))
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        push_string(&mut out, &self.kind);
        push_string(&mut out, &self.config_echo);
        out.extend_from_slice(&(self.stores.len() as u32).to_le_bytes());
        for (name, store) in &self.stores {
            push_string(&mut out, name);
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (pname, tensor) in store.entries() {
                push_string(&mut out, pname);
                out.push(tensor.shape().len() as u8);
                for &d in tensor.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let kind = r.string()?;
        let config_echo = r.string()?;
        let n_stores = r.u32()? as usize;
        let mut stores = Vec::with_capacity(n_stores);
        for _ in 0..n_stores {
            let sname = r.string()?;
            let n_params = r.u32()? as usize;
            let mut store = ParamStore::new();
            for _ in 0..n_params {
                let pname = r.string()?;
                let ndim = r.take(1)?[0] as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    let b = r.take(8)?;
                    data.push(f64::from_le_bytes(b.try_into().unwrap()));
                }
                store.insert(&pname, Tensor::new(shape, data));
            }
            stores.push((sname, store));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint { kind, config_echo, stores })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn store(&self, name: &str) -> Option<&ParamStore> {
        self.stores.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

/// Captures a student's five parameter groups.
pub fn student_checkpoint(model: &crate::student::StudentModel, config_echo: &str) -> Checkpoint {
    Checkpoint {
        kind: "student".into(),
        config_echo: config_echo.to_string(),
        stores: vec![
            ("theta1".into(), model.theta1.clone()),
            ("theta2".into(), model.theta2.clone()),
            ("theta3".into(), model.theta3.clone()),
            ("omega".into(), model.omega.clone()),
            ("zeta".into(), model.zeta.clone()),
        ],
    }
}

/// Restores parameter values into a freshly built student of the same
/// configuration.
pub fn restore_student(
    model: &mut crate::student::StudentModel,
    ckpt: &Checkpoint,
) -> Result<(), CheckpointError> {
    if ckpt.kind != "student" {
        return Err(CheckpointError::Malformed(format!(
            "expected a student checkpoint, found kind `{}`",
            ckpt.kind
        )));
    }
    use crate::student::StoreKind;
    for (name, kind) in [
        ("theta1", StoreKind::Theta1),
        ("theta2", StoreKind::Theta2),
        ("theta3", StoreKind::Theta3),
        ("omega", StoreKind::Omega),
        ("zeta", StoreKind::Zeta),
    ] {
        let saved = ckpt
            .store(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing store `{}`", name)))?;
        restore_store(model.store_mut(kind), saved)?;
    }
    Ok(())
}

/// Captures the teacher's generator and critic.
pub fn teacher_checkpoint(model: &crate::teacher::TeacherModel, config_echo: &str) -> Checkpoint {
    Checkpoint {
        kind: "teacher".into(),
        config_echo: config_echo.to_string(),
        stores: vec![("psi".into(), model.psi.clone()), ("critic".into(), model.critic.clone())],
    }
}

pub fn restore_teacher(
    model: &mut crate::teacher::TeacherModel,
    ckpt: &Checkpoint,
) -> Result<(), CheckpointError> {
    if ckpt.kind != "teacher" {
        return Err(CheckpointError::Malformed(format!(
            "expected a teacher checkpoint, found kind `{}`",
            ckpt.kind
        )));
    }
    for name in ["psi", "critic"] {
        let saved = ckpt
            .store(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing store `{}`", name)))?;
        let target = if name == "psi" { &mut model.psi } else { &mut model.critic };
        restore_store(target, saved)?;
    }
    Ok(())
}

/// Captures a frozen generator snapshot (the same container format).
pub fn snapshot_checkpoint(snap: &crate::teacher::TeacherSnapshot, config_echo: &str) -> Checkpoint {
    Checkpoint {
        kind: format!("teacher-snapshot-{}", snap.task_count()),
        config_echo: config_echo.to_string(),
        stores: vec![("psi".into(), snap.params().clone())],
    }
}

/// Overwrites a live store's parameter values from a checkpointed store.
/// Names and shapes must match exactly.
pub fn restore_store(target: &mut ParamStore, saved: &ParamStore) -> Result<(), CheckpointError> {
    let names: Vec<String> = target.names().map(str::to_string).collect();
    for name in &names {
        let Some(_) = saved.names().find(|n| n == name) else {
            return Err(CheckpointError::Malformed(format!("missing parameter `{}`", name)));
        };
    }
    for name in names {
        let src = saved.get(&name);
        let dst = target.get_mut(&name);
        if dst.shape() != src.shape() {
            return Err(CheckpointError::Malformed(format!(
                "parameter `{}` shape {:?} != saved {:?}",
                name,
                dst.shape(),
                src.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
