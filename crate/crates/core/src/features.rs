//! Style statistics and the flattened final-encoding embedding.

use std::fmt;

use crate::backbone::{prepare_input, Backbone, BackboneError, FeatureMap, Result, DEFAULT_STYLE_TAPS, FINAL_ENCODING};
use crate::imaging::{extract_iris, EyeImage, ImagingError, IrisCrop, SegMask};
use crate::tensor::{Real, Tensor3};

/// Added to the variance before the square root.
pub const STATS_EPSILON: f64 = 1e-8;

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Sums in ascending order so the result does not depend on element order.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

pub fn channel_stats<T: Real>(map: &Tensor3<T>) -> ChannelStats {
    let n = map.plane_len() as f64;
    let mut buf = vec![0.0; map.plane_len()];
    let mut mean = Vec::with_capacity(map.channels);
    let mut std = Vec::with_capacity(map.channels);
    for c in 0..map.channels {
        let plane = map.plane(c);
        for (b, v) in buf.iter_mut().zip(plane) {
            *b = v.as_f64();
        }
        let mu = ordered_sum(&mut buf) / n;
        for (b, v) in buf.iter_mut().zip(plane) {
            let d = v.as_f64() - mu;
            *b = d * d;
        }
        let var = ordered_sum(&mut buf) / n;
        mean.push(mu);
        std.push((var + STATS_EPSILON).sqrt());
    }
    ChannelStats { mean, std }
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Pulls gradients on the mean and std back onto the activation map.
    pub fn backward<T: Real>(&self, map: &Tensor3<T>, grad_mean: &[f64], grad_std: &[f64]) -> Tensor3<T> {
        let n = map.plane_len() as f64;
        let mut out = Tensor3::zeros(map.channels, map.height, map.width);
        for c in 0..map.channels {
            let (mu, sd) = (self.mean[c], self.std[c]);
            let (gm, gs) = (grad_mean[c] / n, grad_std[c] / (n * sd));
            for (o, v) in out.plane_mut(c).iter_mut().zip(map.plane(c)) {
                *o = T::lit(gm + gs * (v.as_f64() - mu));
            }
        }
        out
    }
}

/// Concatenated style statistics: for each tap, all means then all stds.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeature {
    pub taps: Vec<String>,
    pub vector: Vec<f64>,
}

impl StyleFeature {
    pub fn from_stats(taps: &[&str], stats: &[ChannelStats]) -> Self {
        let mut vector = Vec::with_capacity(stats.iter().map(|s| 2 * s.channels()).sum());
        for s in stats {
            vector.extend_from_slice(&s.mean);
            vector.extend_from_slice(&s.std);
        }
        Self { taps: taps.iter().map(|t| t.to_string()).collect(), vector }
    }

    pub fn from_maps<T: Real>(maps: &[FeatureMap<T>]) -> Self {
        let taps: Vec<&str> = maps.iter().map(|m| m.tap.as_str()).collect();
        let stats: Vec<ChannelStats> = maps.iter().map(|m| channel_stats(&m.values)).collect();
        Self::from_stats(&taps, &stats)
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.vector.iter().map(|&v| v as f32).collect()
    }
}

/// Flattened `final_encoding` activations, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentEmbedding(pub Vec<f32>);

impl ContentEmbedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn style_feature<T: Real>(net: &Backbone<T>, crop: &IrisCrop, taps: &[&str]) -> Result<StyleFeature> {
    let input = prepare_input::<T>(crop, net.input_size())?;
    Ok(StyleFeature::from_maps(&net.activations(&input, taps)?))
}

pub fn cnn_feature<T: Real>(net: &Backbone<T>, crop: &IrisCrop) -> Result<ContentEmbedding> {
    let input = prepare_input::<T>(crop, net.input_size())?;
    let map = net.activations(&input, &[FINAL_ENCODING])?.remove(0);
    Ok(ContentEmbedding(map.values.data.iter().map(|v| v.as_f64() as f32).collect()))
}

/// The two descriptors compared throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    /// Statistics over the default style taps.
    Style,
    /// Flattened final encoding.
    Cnn,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 2] = [FeatureKind::Style, FeatureKind::Cnn];

    /// Short name used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            FeatureKind::Style => "style",
            FeatureKind::Cnn => "cnn",
        }
    }

    /// Cache key, which includes the input size for size-dependent kinds.
    pub fn cache_key(&self, input_size: usize) -> String {
        match self {
            FeatureKind::Style => "style-default".to_string(),
            FeatureKind::Cnn => format!("cnn-{input_size}"),
        }
    }

    pub fn dim(&self, input_size: usize) -> usize {
        match self {
            FeatureKind::Style => 2 * [64, 128, 256, 512].iter().sum::<usize>(),
            FeatureKind::Cnn => 512 * (input_size / 32) * (input_size / 32),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Computes several descriptors from a single forward pass.
pub fn extract_features<T: Real>(net: &Backbone<T>, crop: &IrisCrop, kinds: &[FeatureKind]) -> Result<Vec<Vec<f32>>> {
    let input = prepare_input::<T>(crop, net.input_size())?;
    let mut taps: Vec<&str> = Vec::new();
    if kinds.contains(&FeatureKind::Style) {
        taps.extend(DEFAULT_STYLE_TAPS);
    }
    if kinds.contains(&FeatureKind::Cnn) {
        taps.push(FINAL_ENCODING);
    }
    let maps = net.activations(&input, &taps)?;
    let style_maps = &maps[..if kinds.contains(&FeatureKind::Style) { DEFAULT_STYLE_TAPS.len() } else { 0 }];
    Ok(kinds
        .iter()
        .map(|k| match k {
            FeatureKind::Style => StyleFeature::from_maps(style_maps).to_f32(),
            FeatureKind::Cnn => maps.last().expect("final tap").values.data.iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect())
}

/// Extracts the iris of an eye image and computes the requested descriptors.
pub fn eye_features<T: Real>(
    net: &Backbone<T>,
    image: &EyeImage,
    mask: &SegMask,
    glint_threshold: u8,
    kinds: &[FeatureKind],
) -> std::result::Result<Vec<Vec<f32>>, FeatureError> {
    let crop = extract_iris(image, mask, glint_threshold)?;
    Ok(extract_features(net, &crop, kinds)?)
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let s = channel_stats(&Tensor3::from_vec(1, 2, 2, vec![1.0f64, 3.0, 5.0, 7.0]));
        assert_eq!(s.mean, vec![4.0]);
        assert!((s.std[0] - 5f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn constant_map_has_epsilon_std() {
        let s = channel_stats(&Tensor3::from_vec(1, 3, 3, vec![2.5f32; 9]));
        assert_eq!(s.mean, vec![2.5]);
        assert!((s.std[0] - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn layout_is_means_then_stds_per_tap() {
        let a = ChannelStats { mean: vec![1.0, 2.0], std: vec![3.0, 4.0] };
        let b = ChannelStats { mean: vec![5.0], std: vec![6.0] };
        let f = StyleFeature::from_stats(&["x", "y"], &[a, b]);
        assert_eq!(f.vector, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn dims() {
        assert_eq!(FeatureKind::Style.dim(224), 1920);
        assert_eq!(FeatureKind::Cnn.dim(224), 25_088);
        assert_eq!(FeatureKind::Cnn.dim(64), 2048);
        assert_eq!(FeatureKind::Cnn.cache_key(64), "cnn-64");
    }
}
