use mmcap::fixtures::{analogy_space, AnalogySpace};
use mmcap::regularities::{analogy_query, analogy_with_resort, DEFAULT_POOL, DEFAULT_VISIBLE};

#[test]
fn every_fixture_analogy_hits_its_target() {
    let space = analogy_space(32, 8, 21).unwrap();
    assert_eq!(space.analogies.len(), 24);
    for a in &space.analogies {
        let pos = space.index.position(&a.query_id).unwrap();
        let q = space.index.vector(pos).to_vec();
        let (wn, wp) = (space.word(&a.negative), space.word(&a.positive));
        let hits = analogy_query(&q, wn, wp, &space.index, 1, Some(&a.query_id)).unwrap();
        assert_eq!(AnalogySpace::class_of(&hits[0].0), a.target, "{a:?}");
        let resorted =
            analogy_with_resort(&q, wn, wp, &space.index, DEFAULT_POOL, DEFAULT_VISIBLE, Some(&a.query_id)).unwrap();
        assert_eq!(resorted.len(), DEFAULT_VISIBLE);
        assert_eq!(AnalogySpace::class_of(&resorted[0]), a.target, "{a:?} {resorted:?}");
    }
}

#[test]
fn query_image_never_returned() {
    let space = analogy_space(16, 2, 4).unwrap();
    let a = &space.analogies[0];
    let q = space.index.vector(space.index.position(&a.query_id).unwrap()).to_vec();
    let w = space.word(&a.negative);
    let hits = analogy_query(&q, w, w, &space.index, 24, Some(&a.query_id)).unwrap();
    assert_eq!(hits.len(), 23);
    assert!(hits.iter().all(|(id, _)| id != &a.query_id));
}
