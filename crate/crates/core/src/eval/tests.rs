use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{make_shifted_variant, Shift};
use crate::testutil::*;
use crate::trainer::finetune;

#[test]
fn harmonic_mean_reference_pairs() {
    assert!((harmonic_mean(82.69, 63.22) - 71.66).abs() <= 0.01);
    assert!((harmonic_mean(84.00, 77.23) - 80.48).abs() <= 0.01);
    assert_eq!(harmonic_mean(42.5, 42.5), 42.5);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (a, b): (f64, f64) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
        assert!(harmonic_mean(a, b) <= 0.5 * (a + b) + 1e-12);
    }
}

#[test]
fn prediction_rules() {
    let p = prediction_from_similarities(&[0.0, 0.0, 1.0, 0.0], 0.07);
    assert_eq!(p.index, 2);
    let p = prediction_from_similarities(&[0.3; 5], 0.07);
    assert_eq!(p.index, 0);
    assert!(p.probs.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let sims: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = rng.gen_range(0.02..1.0);
        let p = prediction_from_similarities(&sims, tau);
        let z: f64 = sims.iter().map(|s| (s / tau).exp()).sum();
        for (k, s) in sims.iter().enumerate() {
            assert!((p.probs[k] - (s / tau).exp() / z).abs() < 1e-10);
        }
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = sims.iter().map(|s| s * 3.7).collect();
        assert_eq!(prediction_from_similarities(&scaled, tau).index, p.index);
    }
}

#[test]
fn summaries() {
    assert_eq!(summarize(&[]), None);
    let s = summarize(&[3.0, 1.0, 2.0]).unwrap();
    assert_eq!((s.median, s.mean), (2.0, 2.0));
    assert_eq!(summarize(&[4.0, 1.0, 2.0, 10.0]).unwrap().median, 3.0);
}

#[test]
fn classifier_matches_backbone_when_untuned() {
    let ds = tiny_source();
    let enc = tiny_backbone(&ds, 0);
    let cls = Classifier::zero_shot(&enc);
    let names = ds.class_names();
    let c = cls.class_embeddings(&names).unwrap();
    let direct = enc
        .class_text_embeddings(&names.iter().map(|n| template(n)).collect::<Vec<_>>())
        .unwrap();
    assert!(c.bit_eq(&direct));
    let r = &ds.records[0];
    let img = cls.image_embeddings(&[r.pixels.as_slice()]).unwrap();
    let e = enc.encode_image(&r.pixels).unwrap();
    for (a, b) in img.data().iter().zip(e.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(cls.class_embeddings(&["nosuch".into()]), Err(Error::VocabularyMiss(w)) if w == ["nosuch"]));
}

#[test]
fn batched_classification_matches_single_predictions() {
    let ds = tiny_source();
    let enc = tiny_backbone(&ds, 1);
    let split = tiny_split(&ds, 0);
    let ck = finetune(&enc, "b", "d", &split, &TrainConfig { shots: 4, max_steps: Some(4), ..Default::default() }).unwrap();
    let cls = Classifier::from_checkpoint(&enc, &ck);
    let names = ds.class_names();
    let recs: Vec<_> = ds.pool(Pool::Test).take(70).collect();
    let imgs: Vec<&[f32]> = recs.iter().map(|r| r.pixels.as_slice()).collect();
    let batch = cls.classify(&imgs, &names).unwrap();
    for (img, p) in imgs.iter().zip(&batch) {
        let one = cls.predict(img, &names).unwrap();
        assert_eq!(one.index, p.index);
        for (a, b) in one.probs.iter().zip(&p.probs) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn base_to_novel_report_is_consistent_and_repeatable() {
    let ds = tiny_source();
    let enc = tiny_backbone(&ds, 2);
    let cls = Classifier::zero_shot(&enc);
    let a = base_to_novel_eval(&cls, &ds).unwrap();
    let b = base_to_novel_eval(&cls, &ds).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hm, harmonic_mean(a.base_acc, a.novel_acc));
    assert!((0.0..=100.0).contains(&a.base_acc) && (0.0..=100.0).contains(&a.novel_acc));
    let base: Vec<_> = a.per_class.iter().filter(|c| !c.novel).collect();
    let correct: usize = base.iter().map(|c| c.correct).sum();
    let total: usize = base.iter().map(|c| c.total).sum();
    assert_eq!(a.base_acc, 100.0 * correct as f64 / total as f64);
    assert_eq!(a.novel_classes.len(), 4);

    let mut bad = ds.clone();
    bad.manifest.split.novel.push(bad.manifest.split.base[0]);
    assert!(matches!(base_to_novel_eval(&cls, &bad), Err(Error::ClassOverlap(_))));
}

#[test]
fn cross_dataset_values_and_empty_table() {
    let ds = tiny_source();
    let enc = tiny_backbone(&ds, 3);
    let cls = Classifier::zero_shot(&enc);
    let t = cross_dataset_eval(&cls, "source", &[]).unwrap();
    assert!(t.rows.is_empty() && t.average.is_none());
    assert!(t.table().render().contains('-'));

    let t = cross_dataset_eval(&cls, "source", &[&ds, &ds]).unwrap();
    let classes: Vec<usize> = (0..ds.manifest.classes.len()).collect();
    let (acc, _) = pool_accuracy(&cls, &ds, &ds.select(Pool::Test, &classes), &classes).unwrap();
    assert_eq!(t.rows[0].1, acc);
    assert_eq!(t.average, Some(acc));

    let mut foreign = ds.clone();
    foreign.manifest.classes[0].name = "wibble".into();
    assert!(matches!(cross_dataset_eval(&cls, "s", &[&foreign]), Err(Error::VocabularyMiss(w)) if w == ["wibble"]));
}

#[test]
fn domain_table_identity_and_mismatch() {
    let ds = tiny_source();
    let enc = tiny_backbone(&ds, 4);
    let cls = Classifier::zero_shot(&enc);
    let id = make_shifted_variant(&ds, Shift::Identity).unwrap();
    let t = domain_gen_eval(&cls, &ds, &[&id]).unwrap();
    assert_eq!(t.source.as_ref().unwrap().1, t.rows[0].1);
    let mut other = id.clone();
    other.manifest.classes.swap(0, 1);
    assert!(matches!(domain_gen_eval(&cls, &ds, &[&other]), Err(Error::ClassMismatch(_))));
}

#[test]
fn tables_render_and_serialize() {
    let mut t = Table::new("title", &["name", "value", "gap"]);
    t.push(vec!["a,b".into(), 71.6612345.into(), Cell::Empty]);
    assert_eq!(t.to_csv(), "name,value,gap\n\"a,b\",71.6612345,\n");
    let r = t.render();
    assert!(r.contains("71.66") && !r.contains("71.661"));
    assert_eq!(r.lines().count(), 4);
}
