use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{Backbone, BackboneError, Result, ShapeMismatch};
use crate::tensor::{Conv2d, Real};

/// Where backbone parameters come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightSource {
    /// A safetensors file with torchvision `features.{i}.weight|bias` keys.
    File(PathBuf),
    /// He-initialised weights from a seed (`random:<seed>`).
    Seeded(u64),
}

impl WeightSource {
    pub fn load<T: Real>(&self) -> Result<Backbone<T>> {
        match self {
            WeightSource::File(path) => load_backbone(path),
            WeightSource::Seeded(seed) => Ok(Backbone::seeded(*seed)),
        }
    }
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSource::File(p) => write!(f, "{}", p.display()),
            WeightSource::Seeded(s) => write!(f, "random:{s}"),
        }
    }
}

impl FromStr for WeightSource {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.strip_prefix("random:") {
            Some(seed) => Ok(WeightSource::Seeded(seed.trim().parse()?)),
            None => Ok(WeightSource::File(PathBuf::from(s))),
        }
    }
}

/// Positions of the conv layers inside torchvision's `features` sequence.
fn layer_indices() -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    for widths in super::VGG19_BLOCKS {
        for _ in widths.iter() {
            out.push(i);
            i += 2;
        }
        i += 1;
    }
    out
}

pub(crate) fn read_values<T: Real>(view: &TensorView<'_>) -> Option<Vec<T>> {
    let bytes = view.data();
    match view.dtype() {
        Dtype::F32 => Some(bytes.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect()),
        Dtype::F64 => Some(bytes.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap()))).collect()),
        _ => None,
    }
}

/// Loads VGG19 parameters from a safetensors file, validating every shape.
pub fn load_backbone<T: Real>(path: &Path) -> Result<Backbone<T>> {
    let err = |message: String| BackboneError::Weights { path: path.display().to_string(), message };
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| err(e.to_string()))?;
    let mut mismatches = Vec::new();
    let mut convs = Vec::new();
    for (shape, idx) in Backbone::<T>::topology().into_iter().zip(layer_indices()) {
        let mut conv = Conv2d::<T>::new(shape[1], shape[0], shape[2], 1, 1);
        let mut bias = vec![T::zero(); shape[0]];
        for (name, expected, dst) in [
            (format!("features.{idx}.weight"), shape.to_vec(), &mut conv.weight),
            (format!("features.{idx}.bias"), vec![shape[0]], &mut bias),
        ] {
            match st.tensor(&name) {
                Ok(view) if view.shape() == expected.as_slice() => {
                    *dst = read_values(&view).ok_or_else(|| err(format!("{name}: unsupported dtype {:?}", view.dtype())))?;
                }
                Ok(view) => mismatches.push(ShapeMismatch { tensor: name, expected, found: Some(view.shape().to_vec()) }),
                Err(_) => mismatches.push(ShapeMismatch { tensor: name, expected, found: None }),
            }
        }
        conv.bias = Some(bias);
        convs.push(conv);
    }
    if !mismatches.is_empty() {
        return Err(BackboneError::Topology(mismatches));
    }
    Ok(Backbone::from_convs(convs))
}

/// Writes parameters as little-endian `f32` safetensors with torchvision keys.
pub fn save_backbone<T: Real>(net: &Backbone<T>, path: &Path) -> Result<()> {
    let mut buffers = Vec::new();
    for (conv, idx) in net.convs().zip(layer_indices()) {
        let to_bytes = |v: &[T]| v.iter().flat_map(|x| (x.as_f64() as f32).to_le_bytes()).collect::<Vec<u8>>();
        let bias = conv.bias.clone().unwrap_or_else(|| vec![T::zero(); conv.out_channels]);
        buffers.push((format!("features.{idx}.weight"), conv.weight_shape().to_vec(), to_bytes(&conv.weight)));
        buffers.push((format!("features.{idx}.bias"), vec![conv.out_channels], to_bytes(&bias)));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, data)| Ok((name.clone(), TensorView::new(Dtype::F32, shape.clone(), data).map_err(|e| e.to_string())?)))
        .collect::<std::result::Result<Vec<_>, String>>()
        .map_err(|message| BackboneError::Weights { path: path.display().to_string(), message })?;
    safetensors::serialize_to_file(views, None, path)
        .map_err(|e| BackboneError::Weights { path: path.display().to_string(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torchvision_layer_positions() {
        let idx = layer_indices();
        assert_eq!(idx.len(), 16);
        assert_eq!(&idx[..4], &[0, 2, 5, 7]);
        assert_eq!(idx[8], 19);
        assert_eq!(idx[15], 34);
    }

    #[test]
    fn safetensors_roundtrip_preserves_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let net = Backbone::<f32>::seeded(7);
        save_backbone(&net, &path).unwrap();
        let back: Backbone<f32> = load_backbone(&path).unwrap();
        assert_eq!(back.checksum(), net.checksum());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        save_backbone(&Backbone::<f32>::seeded(7), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_backbone::<f32>(&path), Err(BackboneError::Weights { .. })));
    }

    #[test]
    fn wrong_shape_lists_every_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let data = vec![0u8; 4 * 8];
        let view = TensorView::new(Dtype::F32, vec![8], &data).unwrap();
        safetensors::serialize_to_file(vec![("features.0.bias".to_string(), view)], None, &path).unwrap();
        match load_backbone::<f32>(&path) {
            Err(BackboneError::Topology(list)) => {
                assert_eq!(list.len(), 32);
                let bias = list.iter().find(|m| m.tensor == "features.0.bias").unwrap();
                assert_eq!(bias.found, Some(vec![8]));
                assert_eq!(bias.expected, vec![64]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn source_parsing() {
        assert_eq!("random:42".parse::<WeightSource>().unwrap(), WeightSource::Seeded(42));
        assert_eq!("w.safetensors".parse::<WeightSource>().unwrap(), WeightSource::File("w.safetensors".into()));
        assert_eq!(WeightSource::Seeded(3).to_string(), "random:3");
    }
}
