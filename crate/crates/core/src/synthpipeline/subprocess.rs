//! Stage adapter that shells out to an external program.
//!
//! For every call a fresh work directory is created holding `request.json`
//! and the input images (`still.png`, plus `a.png` / `b.png` for
//! interpolation). The program is invoked as `program [args…] <stage>
//! <workdir>` with `stage` one of `still`, `keyframe`, `interpolate`, and
//! must write `output.png` at the requested resolution. It may also write
//! `landmarks.json`; if absent, keyframes reuse the still's landmarks and
//! interpolated frames average their neighbours'. Stills must provide
//! landmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use super::{IdentitySeed, InterpolationBackend, KeyframeBackend, MotionFrame, PoseExpressionSample, Still, StillBackend};
use crate::datamodel::io::{frame_from_rgb8, read_json, write_frame_png, write_json};
use crate::datamodel::{AgeValue, FaceLandmarks, Frame};
use crate::error::{Error, Result};

static CALLS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct SubprocessBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
}

#[derive(Serialize)]
struct Request<'a> {
    stage: &'a str,
    identity_seed: u64,
    age: f64,
    resolution: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose: Option<&'a PoseExpressionSample>,
}

struct WorkDir(PathBuf);

impl Drop for WorkDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

impl SubprocessBackend {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        SubprocessBackend {
            program: program.into(),
            args,
        }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Backend {
            backend: self.program.display().to_string(),
            reason: reason.into(),
        }
    }

    fn call(
        &self,
        stage: &str,
        request: &Request,
        inputs: &[(&str, &Frame)],
        resolution: usize,
    ) -> Result<(Frame, Option<FaceLandmarks>)> {
        let n = CALLS.fetch_add(1, Ordering::SeqCst);
        let dir = WorkDir(std::env::temp_dir().join(format!("reage-{}-{n}", std::process::id())));
        fs::create_dir_all(&dir.0).map_err(|e| Error::io(format!("creating {}", dir.0.display()), e))?;
        write_json(request, &dir.0.join("request.json"))?;
        for (name, frame) in inputs {
            write_frame_png(frame, &dir.0.join(name))?;
        }
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(stage)
            .arg(&dir.0)
            .status()
            .map_err(|e| self.fail(format!("could not start: {e}")))?;
        if !status.success() {
            return Err(self.fail(format!("{stage} exited with {status}")));
        }
        let frame = read_output(&dir.0.join("output.png")).map_err(|e| self.fail(e.to_string()))?;
        if frame.height() != resolution || frame.width() != resolution {
            return Err(self.fail(format!(
                "output is {}×{}, expected {resolution}×{resolution}",
                frame.height(),
                frame.width()
            )));
        }
        let lm_path = dir.0.join("landmarks.json");
        let landmarks = if lm_path.exists() { Some(read_json(&lm_path)?) } else { None };
        Ok((frame, landmarks))
    }
}

fn read_output(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), std::io::Error::other(e)))?
        .to_rgb8();
    frame_from_rgb8(&img)
}

impl StillBackend for SubprocessBackend {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn synthesize(&self, identity: IdentitySeed, age: AgeValue, resolution: usize) -> Result<Still> {
        let req = Request {
            stage: "still",
            identity_seed: identity.0,
            age: age.years(),
            resolution,
            pose: None,
        };
        let (frame, landmarks) = self.call("still", &req, &[], resolution)?;
        let landmarks = landmarks.ok_or_else(|| self.fail("still stage must write landmarks.json"))?;
        Ok(Still {
            identity,
            age,
            frame,
            landmarks,
        })
    }
}

impl KeyframeBackend for SubprocessBackend {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn keyframe(&self, still: &Still, sample: &PoseExpressionSample) -> Result<MotionFrame> {
        let res = still.frame.height();
        let req = Request {
            stage: "keyframe",
            identity_seed: still.identity.0,
            age: still.age.years(),
            resolution: res,
            pose: Some(sample),
        };
        let (frame, landmarks) = self.call("keyframe", &req, &[("still.png", &still.frame)], res)?;
        Ok(MotionFrame {
            frame,
            landmarks: landmarks.unwrap_or_else(|| still.landmarks.clone()),
            pose: sample.clone(),
        })
    }
}

impl InterpolationBackend for SubprocessBackend {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn midpoint(&self, still: &Still, a: &MotionFrame, b: &MotionFrame) -> Result<MotionFrame> {
        let res = still.frame.height();
        let pose = a.pose.midpoint(&b.pose);
        let req = Request {
            stage: "interpolate",
            identity_seed: still.identity.0,
            age: still.age.years(),
            resolution: res,
            pose: Some(&pose),
        };
        let inputs = [("still.png", &still.frame), ("a.png", &a.frame), ("b.png", &b.frame)];
        let (frame, landmarks) = self.call("interpolate", &req, &inputs, res)?;
        Ok(MotionFrame {
            frame,
            landmarks: landmarks.unwrap_or_else(|| a.landmarks.midpoint(&b.landmarks)),
            pose,
        })
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::synthpipeline::ProceduralBackend;

    #[test]
    fn shell_keyframe_stage_round_trips() {
        let still = ProceduralBackend
            .synthesize(IdentitySeed(5), AgeValue::new(40.0).unwrap(), 32)
            .unwrap();
        // `sh -c script sh <stage> <dir>`: the stage is $1, the directory $2.
        let backend = SubprocessBackend::new("sh", vec!["-c".into(), r#"cp "$2/still.png" "$2/output.png""#.into(), "sh".into()]);
        let sample = PoseExpressionSample::neutral(4);
        let k = backend.keyframe(&still, &sample).unwrap();
        assert!(k.frame.max_abs_diff(&still.frame).unwrap() <= 1.0 / 127.5);
        assert_eq!(k.landmarks, still.landmarks);
    }

    #[test]
    fn failing_program_is_backend_error() {
        let backend = SubprocessBackend::new("sh", vec!["-c".into(), "exit 3".into(), "sh".into()]);
        let err = backend
            .synthesize(IdentitySeed(1), AgeValue::new(30.0).unwrap(), 16)
            .unwrap_err();
        assert!(matches!(err, Error::Backend { .. }), "{err}");
    }
}
