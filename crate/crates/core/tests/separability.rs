use iris_style::backbone::Backbone;
use iris_style::data::generate_synthetic_corpus;
use iris_style::features::{eye_features, FeatureKind};
use iris_style::recognition::Standardizer;

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn style_features_are_closer_within_a_user_than_across_users() {
    let corpus = generate_synthetic_corpus(5, 6, 200, 320, 42).unwrap();
    let net = Backbone::<f32>::seeded(42).with_input_size(64).unwrap();
    let raw: Vec<Vec<f32>> = corpus.samples.iter().map(|s| eye_features(&net, &s.image, &s.mask, 250, &[FeatureKind::Style]).unwrap().remove(0)).collect();
    let scale = Standardizer::fit(&raw);
    let z: Vec<Vec<f32>> = raw
        .iter()
        .map(|r| {
            let mut out = Vec::new();
            scale.apply(r, &mut out);
            out
        })
        .collect();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            let d = distance(&z[i], &z[j]);
            if corpus.samples[i].user == corpus.samples[j].user {
                within.push(d);
            } else {
                across.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&within) < mean(&across), "within {:.2} vs across {:.2}", mean(&within), mean(&across));
}
