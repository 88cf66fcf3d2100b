//! Binary model container and CTM export.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{AcousticModel, AlignmentPath, AmError, Ctx, Gmm, HmmState, ModelKind, Topology};

const MAGIC: &[u8; 4] = b"BAM\0";
pub const MODEL_VERSION: u32 = 1;

fn ctx_code(c: Ctx) -> i32 {
    c.map_or(-1, |p| p as i32)
}

fn code_ctx(c: i32) -> Ctx {
    (c >= 0).then_some(c as usize)
}

impl AcousticModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_to(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dim = self.dim();
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(MODEL_VERSION)?;
        w.write_u8(match self.kind {
            ModelKind::Monophone => 0,
            ModelKind::Triphone => 1,
        })?;
        w.write_u32::<LE>(self.topology.states_per_phone as u32)?;
        w.write_u32::<LE>(self.topology.silence_states as u32)?;
        w.write_u32::<LE>(dim as u32)?;
        w.write_u32::<LE>(self.phones().len() as u32)?;
        for p in self.phones() {
            w.write_u32::<LE>(p.len() as u32)?;
            w.write_all(p.as_bytes())?;
        }
        w.write_u32::<LE>(self.states.len() as u32)?;
        for s in &self.states {
            w.write_f64::<LE>(s.self_loop)?;
            w.write_u32::<LE>(s.gmm.n_components() as u32)?;
            for k in 0..s.gmm.n_components() {
                w.write_f64::<LE>(s.gmm.weights()[k])?;
                for &x in s.gmm.means()[k].iter().chain(&s.gmm.vars()[k]) {
                    w.write_f64::<LE>(x)?;
                }
            }
        }
        let write_ids = |w: &mut W, ids: &[usize]| -> std::io::Result<()> {
            w.write_u32::<LE>(ids.len() as u32)?;
            ids.iter().try_for_each(|&i| w.write_u32::<LE>(i as u32))
        };
        for ids in self.mono_map() {
            write_ids(w, ids)?;
        }
        w.write_u32::<LE>(self.tri_map().len() as u32)?;
        for (&(l, p, r), ids) in self.tri_map() {
            w.write_i32::<LE>(ctx_code(l))?;
            w.write_u32::<LE>(p as u32)?;
            w.write_i32::<LE>(ctx_code(r))?;
            write_ids(w, ids)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AmError> {
        let mut r = bytes;
        let m = Self::read_from(&mut r).map_err(|e| AmError::Format(e.to_string()))?;
        if !r.is_empty() {
            return Err(AmError::Format("trailing bytes".into()));
        }
        m.check_invariants().map_err(AmError::Format)?;
        Ok(m)
    }

    fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a model file"));
        }
        let version = r.read_u32::<LE>()?;
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let kind = match r.read_u8()? {
            0 => ModelKind::Monophone,
            1 => ModelKind::Triphone,
            _ => return Err(bad("unknown model kind")),
        };
        let topology = Topology {
            states_per_phone: r.read_u32::<LE>()? as usize,
            silence_states: r.read_u32::<LE>()? as usize,
        };
        let dim = r.read_u32::<LE>()? as usize;
        let n_phones = r.read_u32::<LE>()? as usize;
        let mut phones = Vec::with_capacity(n_phones.min(1 << 16));
        for _ in 0..n_phones {
            let len = r.read_u32::<LE>()? as usize;
            let mut buf = vec![0u8; len.min(1 << 16)];
            r.read_exact(&mut buf)?;
            phones.push(String::from_utf8(buf).map_err(|_| bad("phone name is not UTF-8"))?);
        }
        let n_states = r.read_u32::<LE>()? as usize;
        let mut states = Vec::with_capacity(n_states.min(1 << 20));
        for _ in 0..n_states {
            let self_loop = r.read_f64::<LE>()?;
            let n_comp = r.read_u32::<LE>()? as usize;
            if n_comp == 0 || n_comp > 1024 {
                return Err(bad("bad component count"));
            }
            let (mut ws, mut means, mut vars) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..n_comp {
                ws.push(r.read_f64::<LE>()?);
                let mut v = vec![0.0; 2 * dim];
                r.read_f64_into::<LE>(&mut v)?;
                vars.push(v.split_off(dim));
                means.push(v);
            }
            states.push(HmmState { gmm: Gmm::new(ws, means, vars), self_loop });
        }
        let read_ids = |r: &mut R| -> std::io::Result<Vec<usize>> {
            let n = r.read_u32::<LE>()? as usize;
            (0..n)
                .map(|_| {
                    let i = r.read_u32::<LE>()? as usize;
                    if i >= n_states {
                        return Err(bad("state id out of range"));
                    }
                    Ok(i)
                })
                .collect()
        };
        let mut mono = Vec::with_capacity(n_phones);
        for _ in 0..n_phones {
            mono.push(read_ids(r)?);
        }
        let n_tri = r.read_u32::<LE>()? as usize;
        let mut tri = BTreeMap::new();
        for _ in 0..n_tri {
            let l = code_ctx(r.read_i32::<LE>()?);
            let p = r.read_u32::<LE>()? as usize;
            let rc = code_ctx(r.read_i32::<LE>()?);
            if p >= n_phones {
                return Err(bad("phone id out of range"));
            }
            tri.insert((l, p, rc), read_ids(r)?);
        }
        Ok(Self::from_parts(kind, phones, topology, states, mono, tri))
    }

    pub fn save(&self, path: &Path) -> Result<(), AmError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| AmError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, AmError> {
        let bytes = std::fs::read(path).map_err(|source| AmError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// CTM lines (`recording 1 start duration word`) for an alignment whose
/// first frame sits at `offset` seconds into the recording.
pub fn ctm_lines(recording_id: &str, offset: f64, path: &AlignmentPath) -> String {
    path.words
        .iter()
        .map(|w| format!("{recording_id} 1 {:.2} {:.2} {}\n", offset + w.start, w.end - w.start, w.word))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::testutil::separated_model;
    use super::*;

    #[test]
    fn model_bytes_round_trip() {
        let (mut m, _) = separated_model(&["A", "B"], 3, 5);
        m.states[2].gmm = m.states[2].gmm.split(4, 100.0, 1.0);
        m.tri_map_mut().insert((None, 2, Some(3)), vec![0, 1, 2]);
        m.kind = ModelKind::Triphone;
        let bytes = m.to_bytes();
        let back = AcousticModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(AcousticModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(AcousticModel::from_bytes(b"nope").is_err());
    }
}
