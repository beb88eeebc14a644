use prodcat::catalog::{ingest, Taxonomy};
use prodcat::config::RunConfig;
use prodcat::models::{Classifier, LoadedModel, ModelKind};
use prodcat::pipeline::{run_training, TEST_FILE};
use prodcat::synthetic::{generate, SyntheticSpec, CORPUS_FILE, TAXONOMY_FILE};
use prodcat::train::evaluate;

const SMALL: &str = "title_len = 8\ndescription_len = 0\nstructured_len = 16\nembed_dim = 8\nfilters = 4\n\
                     widths = 1,2,3\nfc = 16\nepochs = 5\nbatch_size = 8\nbase_lr = 0.1\nstratify_floor = 0\nhash_dim = 1024\n";

#[test]
fn corpus_on_disk_trains_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&SyntheticSpec {
        classes: 6,
        per_class: 40,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    corpus.write(dir.path()).unwrap();

    let taxonomy = Taxonomy::load(dir.path().join(TAXONOMY_FILE)).unwrap();
    let ingested = ingest(dir.path().join(CORPUS_FILE), &taxonomy).unwrap();
    assert!(ingested.errors.is_empty());
    assert_eq!(ingested.examples, corpus.examples);

    for kind in [ModelKind::Multicnn, ModelKind::Hierarchical] {
        let mut cfg = RunConfig::parse(SMALL).unwrap();
        cfg.kind = kind;
        let out = dir.path().join(format!("{kind:?}"));
        let run = run_training(&cfg, &taxonomy, &ingested.examples, Some(&out)).unwrap();
        let model = LoadedModel::load(&out).unwrap();
        assert_eq!(model.kind(), kind);
        let test = ingest(out.join(TEST_FILE), &taxonomy).unwrap().examples;
        assert_eq!(test, run.test_examples);
        assert_eq!(evaluate(&model, &test).unwrap(), run.test);
        assert!(run.test.top1() > 1.0 / 6.0, "{kind:?} top-1 {}", run.test.top1());
        let p = &test[0].product;
        assert_eq!(model.predict_topk(p, 2).unwrap(), run.model.classifier().predict_topk(p, 2).unwrap());
    }
}
