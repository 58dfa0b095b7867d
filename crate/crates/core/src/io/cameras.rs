//! Cameras JSON: an array of objects
//!
//! ```json
//! [{"id": 0, "position": [0, 0, 0], "quaternion": [1, 0, 0, 0],
//!   "fx": 500, "fy": 500, "cx": 320, "cy": 240, "width": 640, "height": 480}]
//! ```
//!
//! `quaternion` is (w, x, y, z) and rotates world directions into the camera
//! frame (x right, y down, z forward). `near` is optional.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde_json::{json, Map, Value};

use crate::scene::{Camera, UNIT_QUAT_TOL};
use crate::{Error, Result};

pub fn read_cameras_json(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)?;
    parse_cameras_json(&text)
}

pub fn parse_cameras_json(text: &str) -> Result<Vec<Camera>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Cameras(format!("invalid JSON: {e}")))?;
    let arr = value
        .as_array()
        .ok_or_else(|| Error::Cameras("top level must be an array of cameras".into()))?;
    arr.iter().enumerate().map(|(i, v)| parse_camera(i, v)).collect()
}

fn parse_camera(index: usize, v: &Value) -> Result<Camera> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Cameras(format!("entry {index} is not an object")))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(Error::Cameras(format!("entry {index}: field `id` must be a string or number"))),
        None => return Err(Error::Cameras(format!("entry {index}: missing field `id`"))),
    };
    let fail = |field: &str, what: &str| Error::Cameras(format!("camera {id}: field `{field}` {what}"));
    let number = |field: &str| -> Result<f64> {
        let x = obj
            .get(field)
            .ok_or_else(|| fail(field, "is missing"))?
            .as_f64()
            .ok_or_else(|| fail(field, "must be a number"))?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(fail(field, "must be finite"))
        }
    };
    let array = |field: &str, n: usize| -> Result<Vec<f64>> {
        let a = obj
            .get(field)
            .ok_or_else(|| fail(field, "is missing"))?
            .as_array()
            .ok_or_else(|| fail(field, "must be an array"))?;
        if a.len() != n {
            return Err(fail(field, &format!("must have {n} elements, found {}", a.len())));
        }
        a.iter()
            .map(|x| x.as_f64().filter(|x| x.is_finite()).ok_or_else(|| fail(field, "must hold finite numbers")))
            .collect()
    };
    let dimension = |field: &str| -> Result<u32> {
        let x = obj
            .get(field)
            .ok_or_else(|| fail(field, "is missing"))?
            .as_u64()
            .ok_or_else(|| fail(field, "must be a positive integer"))?;
        u32::try_from(x).ok().filter(|&x| x > 0).ok_or_else(|| fail(field, "must be a positive integer"))
    };

    let p = array("position", 3)?;
    let q = array("quaternion", 4)?;
    let q = Quaternion::new(q[0], q[1], q[2], q[3]);
    if (q.norm() - 1.0).abs() > UNIT_QUAT_TOL {
        return Err(fail("quaternion", &format!("must be unit length, norm is {}", q.norm())));
    }
    let (fx, fy) = (number("fx")?, number("fy")?);
    if fx <= 0.0 || fy <= 0.0 {
        return Err(fail(if fx <= 0.0 { "fx" } else { "fy" }, "must be positive"));
    }
    let near = if obj.contains_key("near") { number("near")? } else { Camera::DEFAULT_NEAR };
    if near <= 0.0 {
        return Err(fail("near", "must be positive"));
    }
    let cam = Camera {
        position: Vector3::new(p[0], p[1], p[2]),
        orientation: UnitQuaternion::from_quaternion(q),
        focal: Vector2::new(fx, fy),
        principal_point: Vector2::new(number("cx")?, number("cy")?),
        resolution: [dimension("width")?, dimension("height")?],
        near_plane: near,
    };
    cam.validate().map_err(|e| Error::Cameras(format!("camera {id}: {e}")))?;
    Ok(cam)
}

pub fn camera_to_json(id: usize, cam: &Camera) -> Value {
    let q = cam.orientation.quaternion();
    let mut m = Map::new();
    m.insert("id".into(), json!(id));
    m.insert("position".into(), json!([cam.position.x, cam.position.y, cam.position.z]));
    m.insert("quaternion".into(), json!([q.w, q.i, q.j, q.k]));
    m.insert("fx".into(), json!(cam.focal.x));
    m.insert("fy".into(), json!(cam.focal.y));
    m.insert("cx".into(), json!(cam.principal_point.x));
    m.insert("cy".into(), json!(cam.principal_point.y));
    m.insert("width".into(), json!(cam.resolution[0]));
    m.insert("height".into(), json!(cam.resolution[1]));
    m.insert("near".into(), json!(cam.near_plane));
    Value::Object(m)
}

pub fn write_cameras_json(path: &Path, cameras: &[Camera]) -> Result<()> {
    let arr: Vec<Value> = cameras.iter().enumerate().map(|(i, c)| camera_to_json(i, c)).collect();
    let text = serde_json::to_string_pretty(&arr).map_err(|e| Error::Cameras(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}
