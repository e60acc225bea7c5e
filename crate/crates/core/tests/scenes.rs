use std::collections::HashSet;

use vipa_core::scene::{generate_split, Color, SceneGrammar, SceneObject, Shape, Size, Split, SyntheticScene};

/// Word-level matcher written against the rendered geometry only.
fn satisfies(words: &[String], obj: &SceneObject, side: f64) -> bool {
    words.iter().all(|w| match w.as_str() {
        "the" | "a" | "on" => true,
        "left" => obj.cx < side / 2.0,
        "right" => obj.cx > side / 2.0,
        "top" => obj.cy < side / 2.0,
        "bottom" => obj.cy > side / 2.0,
        other => [obj.shape.word(), obj.color.word(), obj.size.word()].contains(&other),
    })
}

fn audit(scene: &SyntheticScene) {
    let side = scene.image.width as f64;
    let hits: Vec<usize> = (0..scene.objects.len()).filter(|&i| satisfies(&scene.expression, &scene.objects[i], side)).collect();
    assert_eq!(hits, vec![scene.referent], "{:?}", scene.expression);
    let w = scene.image.width;
    let referent = &scene.objects[scene.referent];
    for (k, &m) in scene.gt_mask.iter().enumerate() {
        assert_eq!(m, referent.covers(k % w, k / w));
    }
}

#[test]
fn ten_thousand_expressions_have_unique_referents() {
    let g = SceneGrammar::default();
    let scenes = generate_split(&g, 11, Split::Train, 10_000, 32).unwrap();
    for s in &scenes {
        audit(s);
    }
    let distinct: HashSet<String> = scenes.iter().map(|s| s.expression_text()).collect();
    assert!(distinct.len() > 30, "only {} distinct expressions", distinct.len());
}

#[test]
fn held_out_combinations_never_appear_in_train_or_val() {
    let g = SceneGrammar::default();
    for split in [Split::Train, Split::Val] {
        for s in generate_split(&g, 5, split, 2000, 32).unwrap() {
            assert!(s.objects.iter().all(|o| !g.held_out.contains(&(o.size, o.color, o.shape))));
        }
    }
    let held = generate_split(&g, 5, Split::HeldOut, 500, 32).unwrap();
    let mut seen = HashSet::new();
    for s in &held {
        audit(s);
        let r = &s.objects[s.referent];
        assert!(g.held_out.contains(&(r.size, r.color, r.shape)));
        seen.insert((r.size, r.color, r.shape));
    }
    assert_eq!(seen.len(), g.held_out.len());
}

#[test]
fn splits_share_no_scene() {
    let g = SceneGrammar::default();
    let key = |s: &SyntheticScene| s.image.pixels.iter().map(|v| (v * 255.0).round() as u8).collect::<Vec<u8>>();
    let mut images = HashSet::new();
    for split in [Split::Train, Split::Val, Split::HeldOut] {
        for s in generate_split(&g, 0, split, 300, 32).unwrap() {
            assert!(images.insert(key(&s)), "duplicate scene in {split:?}");
        }
    }
}

#[test]
fn grammar_covers_every_attribute() {
    let words = SceneGrammar::default().words();
    for w in Shape::ALL.iter().map(|s| s.word()).chain(Color::ALL.iter().map(|c| c.word())).chain(Size::ALL.iter().map(|z| z.word())) {
        assert!(words.contains(&w));
    }
}
