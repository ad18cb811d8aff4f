//! Checkpoint directories: a text manifest plus one SPNT file per tensor.
//!
//! ```text
//! spn-checkpoint 1
//! classes 2
//! in_channels 3
//! encoder 8,16,32
//! hidden_channels 8
//! connection three-way
//! propagation_scale 2
//! units 2
//! layer guidance.enc0 3 8 2
//! ...
//! ```
//!
//! `layer` lines give name, input channels, output channels and stride.
//! Weights live in `<name>.weight.spnt` with dims (3, 3, in, out), biases in
//! `<name>.bias.spnt`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, SpnError};
use crate::guidance::{GuidanceArch, GuidanceParams, PrePostParams};
use crate::io::TensorFile;
use crate::propagation::SpnConfig;
use crate::tensor::Scalar;

use super::model::Model;

const HEADER: &str = "spn-checkpoint 1";

pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let arch = &model.guidance.arch;
    let mut m = String::new();
    let _ = writeln!(m, "{HEADER}");
    let _ = writeln!(m, "classes {}", model.classes);
    let _ = writeln!(m, "in_channels {}", arch.in_channels);
    let _ = writeln!(m, "encoder {}", arch.encoder_string());
    let _ = writeln!(m, "hidden_channels {}", model.spn.hidden_channels);
    let _ = writeln!(m, "connection {}", model.spn.connection);
    let _ = writeln!(m, "propagation_scale {}", model.spn.propagation_scale);
    let _ = writeln!(m, "units {}", model.spn.units);
    for (name, conv) in model.layers() {
        let _ = writeln!(
            m,
            "layer {name} {} {} {}",
            conv.in_channels, conv.out_channels, conv.stride
        );
        TensorFile::new(&[3, 3, conv.in_channels, conv.out_channels], &conv.weight)?
            .write(dir.join(format!("{name}.weight.spnt")))?;
        TensorFile::new(&[conv.out_channels], &conv.bias)?
            .write(dir.join(format!("{name}.bias.spnt")))?;
    }
    fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> SpnError {
    SpnError::Checkpoint(msg.into())
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| bad(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad("missing checkpoint header"));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut layers = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "layer" {
            layers.push(rest.to_string());
        } else if !key.is_empty() {
            fields.insert(key, rest.trim());
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| bad(format!("manifest lacks '{k}'")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(format!("manifest field '{k}' is not a count")))
    };
    let spn = SpnConfig {
        units: num("units")?,
        connection: get("connection")?
            .parse()
            .map_err(|_| bad("bad connection kind"))?,
        hidden_channels: num("hidden_channels")?,
        propagation_scale: num("propagation_scale")?,
    };
    spn.validate().map_err(|e| bad(e.to_string()))?;
    let arch = GuidanceArch {
        in_channels: num("in_channels")?,
        encoder: GuidanceArch::parse_encoder(get("encoder")?).map_err(|e| bad(e.to_string()))?,
        hidden_channels: spn.hidden_channels,
        connection: spn.connection,
        propagation_scale: spn.propagation_scale,
    };
    let classes = num("classes")?;
    let mut model = Model {
        classes,
        guidance: GuidanceParams::<T>::init(&arch, 0).map_err(|e| bad(e.to_string()))?,
        prepost: PrePostParams::init(classes, spn.hidden_channels, 0.0, 0)
            .map_err(|e| bad(e.to_string()))?,
        spn,
    };
    let expected: Vec<String> = model
        .layers()
        .iter()
        .map(|(n, c)| format!("{n} {} {} {}", c.in_channels, c.out_channels, c.stride))
        .collect();
    if expected != layers {
        return Err(bad(format!(
            "layer list does not match the architecture: expected {expected:?}, found {layers:?}"
        )));
    }
    let names: Vec<String> = model.layers().into_iter().map(|(n, _)| n).collect();
    for (name, conv) in names.iter().zip(model.layers_mut()) {
        for (suffix, dst, dims) in [
            (
                "weight",
                &mut conv.weight,
                vec![3, 3, conv.in_channels, conv.out_channels],
            ),
            ("bias", &mut conv.bias, vec![conv.out_channels]),
        ] {
            let path = dir.join(format!("{name}.{suffix}.spnt"));
            let tf =
                TensorFile::read(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
            if tf.dims_usize() != dims {
                return Err(bad(format!(
                    "{}: dims {:?}, expected {dims:?}",
                    path.display(),
                    tf.dims
                )));
            }
            *dst = tf.data.to_vec();
        }
    }
    if !model.is_finite() {
        return Err(bad("non-finite parameters"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    #[test]
    fn roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            arch: "4,8".into(),
            hidden_channels: 3,
            ..TrainConfig::default()
        };
        let model = Model::<f32>::init(&cfg).unwrap();
        save_checkpoint(dir.path(), &model).unwrap();
        let back = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_mismatched_layers() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::init(&TrainConfig::default()).unwrap();
        save_checkpoint(dir.path(), &model).unwrap();
        let manifest = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace("encoder 8,16,32", "encoder 8,16")).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(SpnError::Checkpoint(_))
        ));
        assert!(matches!(
            load_checkpoint::<f32>(dir.path().join("missing")),
            Err(SpnError::Checkpoint(_))
        ));
    }
}
