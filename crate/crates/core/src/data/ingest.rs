//! Real-format ingestion: per-frame skeleton JSON, `.obj` vertex lists and
//! linear joint regressors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonGraph;
use crate::tensor::checkpoint::{load_tensor, save_tensor};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint {
    pub name: String,
    pub xyz: [f64; 3],
}

/// One frame file: `{"frame": t, "keypoints": [{"name", "xyz"}, ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonFrame {
    pub frame: usize,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    /// `[t, joints, 3]`; masked frames are zero.
    pub joints: Tensor,
    pub valid: Vec<bool>,
}

pub fn skeleton_frame_json(frame: usize, coords: &[f64], graph: &SkeletonGraph) -> String {
    let keypoints = graph
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| Keypoint {
            name: name.clone(),
            xyz: [coords[3 * j], coords[3 * j + 1], coords[3 * j + 2]],
        })
        .collect();
    serde_json::to_string_pretty(&SkeletonFrame { frame, keypoints }).expect("frame serializes")
}

pub fn write_skeleton_frame(path: &Path, frame: usize, coords: &[f64], graph: &SkeletonGraph) -> Result<()> {
    std::fs::write(path, skeleton_frame_json(frame, coords, graph)).map_err(|e| Error::io(path, e))
}

/// Reads one frame file. A missing or blank file is a masked frame
/// (`Ok(None)`); malformed JSON or a wrong joint list is an error.
pub fn load_skeleton_frame(path: &Path, graph: &SkeletonGraph) -> Result<Option<Vec<f64>>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    if text.trim().is_empty() {
        return Ok(None);
    }
    let frame: SkeletonFrame = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
    let format = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    if frame.keypoints.len() != graph.joints() {
        return Err(format(format!("expected {} keypoints, found {}", graph.joints(), frame.keypoints.len())));
    }
    let mut coords = Vec::with_capacity(3 * graph.joints());
    for (kp, name) in frame.keypoints.iter().zip(&graph.names) {
        if &kp.name != name {
            return Err(format(format!("keypoint `{}` where `{name}` was expected", kp.name)));
        }
        if kp.xyz.iter().any(|v| !v.is_finite()) {
            return Err(format(format!("non-finite coordinate for `{name}`")));
        }
        coords.extend_from_slice(&kp.xyz);
    }
    Ok(Some(coords))
}

/// Loads frames in the given order; missing or blank files become masked
/// zero frames.
pub fn load_skeleton_sequence(paths: &[PathBuf], graph: &SkeletonGraph) -> Result<SkeletonSequence> {
    let j = graph.joints();
    let mut data = Vec::with_capacity(paths.len() * j * 3);
    let mut valid = Vec::with_capacity(paths.len());
    for p in paths {
        match load_skeleton_frame(p, graph)? {
            Some(c) => {
                data.extend(c);
                valid.push(true);
            }
            None => {
                data.extend(std::iter::repeat_n(0.0, j * 3));
                valid.push(false);
            }
        }
    }
    Ok(SkeletonSequence { joints: Tensor::new(&[paths.len(), j, 3], data)?, valid })
}

/// Vertex lines (`v x y z`) of an `.obj` file as `[v, 3]`; every other
/// line is ignored.
pub fn parse_obj(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix("v ") else { continue };
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("vertex line `{line}` needs three numbers"),
            })
        };
        let mut fields = rest.split_whitespace();
        for _ in 0..3 {
            data.push(parse(fields.next())?);
        }
    }
    if data.is_empty() {
        log::warn!("{}: no vertex lines", path.display());
    }
    Tensor::new(&[data.len() / 3, 3], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointRegressor {
    /// `[joints, vertices]`.
    pub matrix: Tensor,
    pub names: Vec<String>,
}

impl JointRegressor {
    pub fn new(matrix: Tensor, names: Vec<String>) -> Result<Self> {
        if matrix.ndim() != 2 || matrix.rows() != names.len() {
            return Err(Error::Config(format!(
                "regressor of shape {:?} with {} joint names",
                matrix.shape(),
                names.len()
            )));
        }
        for r in 0..matrix.rows() {
            let s: f64 = matrix.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                log::warn!("regressor row `{}` sums to {s}, not a convex combination", names[r]);
            }
        }
        Ok(JointRegressor { matrix, names })
    }

    /// Loads a raw tensor file; joints take the bundled 17-joint names when
    /// the row count matches, generic names otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let matrix = load_tensor(path)?;
        if matrix.ndim() != 2 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("regressor must be 2-D, got {:?}", matrix.shape()),
            });
        }
        let h36m = SkeletonGraph::h36m();
        let names = if matrix.rows() == h36m.joints() {
            h36m.names
        } else {
            (0..matrix.rows()).map(|i| format!("joint{i}")).collect()
        };
        Self::new(matrix, names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensor(path, &self.matrix)
    }
}

/// `J = R · V` for vertices `[v, 3]`.
pub fn regress_joints(vertices: &Tensor, reg: &JointRegressor) -> Result<Tensor> {
    let (j, v) = (reg.matrix.rows(), reg.matrix.cols());
    if vertices.shape() != [v, 3] {
        return Err(Error::shape("regress_joints", reg.matrix.shape(), vertices.shape()));
    }
    let mut out = vec![0.0; j * 3];
    kernels::mm_nn(reg.matrix.data(), vertices.data(), j, v, 3, &mut out);
    Tensor::new(&[j, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut r = stream(seed, "ingest-test", 0);
        Tensor::from_fn(shape, |_| r.gen_range(-2.0..2.0))
    }

    fn reg(m: Tensor) -> JointRegressor {
        let n = m.rows();
        JointRegressor::new(m, (0..n).map(|i| format!("j{i}")).collect()).unwrap()
    }

    #[test]
    fn frame_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let g = SkeletonGraph::h36m();
        for seed in 0..20 {
            let mut r = stream(seed, "roundtrip", 0);
            let coords: Vec<f64> = (0..51).map(|_| r.gen::<f64>() * 10f64.powi(r.gen_range(-8..8))).collect();
            let p = dir.path().join(format!("{seed}.json"));
            write_skeleton_frame(&p, seed as usize, &coords, &g).unwrap();
            let back = load_skeleton_frame(&p, &g).unwrap().unwrap();
            assert!(back.iter().zip(&coords).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn zero_frame_loads_and_missing_is_masked() {
        let dir = tempfile::tempdir().unwrap();
        let g = SkeletonGraph::h36m();
        let zero = dir.path().join("0.json");
        write_skeleton_frame(&zero, 0, &[0.0; 51], &g).unwrap();
        std::fs::write(dir.path().join("2.json"), "").unwrap();
        let paths: Vec<PathBuf> = (0..3).map(|i| dir.path().join(format!("{i}.json"))).collect();
        let seq = load_skeleton_sequence(&paths, &g).unwrap();
        assert_eq!(seq.valid, vec![true, false, false]);
        assert_eq!(seq.joints.shape(), &[3, 17, 3]);
    }

    #[test]
    fn wrong_count_and_malformed_json_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let g = SkeletonGraph::h36m();
        let p = dir.path().join("short.json");
        let mut frame: SkeletonFrame = serde_json::from_str(&skeleton_frame_json(0, &[1.0; 51], &g)).unwrap();
        frame.keypoints.pop();
        std::fs::write(&p, serde_json::to_string(&frame).unwrap()).unwrap();
        assert!(load_skeleton_frame(&p, &g).unwrap_err().to_string().contains("expected 17"));
        std::fs::write(&p, "{\"frame\": 0,\n \"keypoints\": [ }").unwrap();
        match load_skeleton_frame(&p, &g).unwrap_err() {
            Error::Json { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn obj_vertices_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        std::fs::write(&p, "# comment\nv 1 2 3\nvn 0 0 1\nf 1 2 3\n").unwrap();
        assert_eq!(parse_obj(&p).unwrap().data(), &[1.0, 2.0, 3.0]);
        std::fs::write(&p, "f 1 2 3\n").unwrap();
        assert_eq!(parse_obj(&p).unwrap().shape(), &[0, 3]);
        std::fs::write(&p, "v 1 2 3\nv 1 x 3\n").unwrap();
        assert!(matches!(parse_obj(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn obj_count_contract() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.obj");
        let text: String = (0..6890).map(|i| format!("v {i} {} {}\nf 1 2 3\n", i as f64 * 0.5, -(i as f64))).collect();
        std::fs::write(&p, text).unwrap();
        let v = parse_obj(&p).unwrap();
        assert_eq!(v.shape(), &[6890, 3]);
        assert_eq!(v.row(6889), &[6889.0, 3444.5, -6889.0]);
    }

    #[test]
    fn one_hot_rows_select_vertices() {
        let verts = rand_t(&[30, 3], 1);
        let picks = [4, 0, 29, 4, 17];
        let r = reg(Tensor::from_fn(&[5, 30], |k| if picks[k / 30] == k % 30 { 1.0 } else { 0.0 }));
        let j = regress_joints(&verts, &r).unwrap();
        for (row, &p) in picks.iter().enumerate() {
            assert_eq!(j.row(row), verts.row(p));
        }
    }

    #[test]
    fn regression_matches_loop_and_is_linear() {
        for seed in 0..20 {
            let m = rand_t(&[17, 30], seed);
            let r = reg(m.clone());
            let (v1, v2) = (rand_t(&[30, 3], seed + 100), rand_t(&[30, 3], seed + 200));
            let j1 = regress_joints(&v1, &r).unwrap();
            for a in 0..17 {
                for c in 0..3 {
                    let want: f64 = (0..30).map(|v| m.data()[a * 30 + v] * v1.data()[v * 3 + c]).sum();
                    assert!((j1.data()[a * 3 + c] - want).abs() < 1e-12);
                }
            }
            let (a, b) = (1.7, -0.3);
            let mix = Tensor::from_fn(&[30, 3], |i| a * v1.data()[i] + b * v2.data()[i]);
            let jm = regress_joints(&mix, &r).unwrap();
            let j2 = regress_joints(&v2, &r).unwrap();
            for i in 0..51 {
                assert!((jm.data()[i] - (a * j1.data()[i] + b * j2.data()[i])).abs() < 1e-12);
            }
            let perm: Vec<usize> = (0..17).rev().collect();
            let pr = reg(Tensor::from_fn(&[17, 30], |k| m.data()[perm[k / 30] * 30 + k % 30]));
            let jp = regress_joints(&v1, &pr).unwrap();
            for (row, &p) in perm.iter().enumerate() {
                assert_eq!(jp.row(row), j1.row(p));
            }
        }
        assert!(regress_joints(&rand_t(&[29, 3], 0), &reg(rand_t(&[17, 30], 0))).is_err());
    }

    #[test]
    fn regressor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reg.bin");
        let r = reg(rand_t(&[17, 12], 5));
        r.save(&p).unwrap();
        let back = JointRegressor::load(&p).unwrap();
        assert_eq!(back.matrix, r.matrix);
        assert_eq!(back.names[10], "Head");
    }
}
