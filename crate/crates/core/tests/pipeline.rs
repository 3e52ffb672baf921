use langgrasp_core::geometry3d::{deproject, rect_to_points, select_grasp};
use langgrasp_core::grasp_maps::{decode_top1, decode_topk, rasterize_gt};
use langgrasp_core::metrics::{grasp_success, success6dof};
use langgrasp_core::synthgen::{gen_scene, SceneConfig};
use langgrasp_core::{Grasp6DoF, GripperModel};

/// Scenes of 4 to 7 objects; seeds whose layout cannot be placed are
/// skipped, as the dataset generator does.
fn scenes() -> Vec<langgrasp_core::synthgen::SceneRecord> {
    let out: Vec<_> = (0..16u64)
        .filter_map(|seed| gen_scene(seed, &SceneConfig::new(4 + (seed as usize % 4), 96)).ok())
        .collect();
    assert!(out.len() >= 8);
    out
}

#[test]
fn rasterized_ground_truth_decodes_to_a_successful_grasp() {
    for scene in scenes() {
        for obj in &scene.objects {
            let maps = rasterize_gt(&obj.grasps4dof, scene.height as u32, scene.width as u32).unwrap();
            let top = decode_top1(&maps).unwrap();
            assert!(grasp_success(&top, &obj.grasps4dof).unwrap(), "scene {} object {}", scene.scene_id, obj.object_id);
            let ranked = decode_topk(&maps, 5, 3);
            assert!(!ranked.is_empty());
            assert_eq!((ranked[0].x, ranked[0].y), (top.x, top.y));
        }
    }
}

#[test]
fn lifting_a_ground_truth_rect_picks_a_pose_of_that_object() {
    let gripper = GripperModel::default();
    let mut lifted = 0;
    for scene in scenes() {
        let cloud = deproject(&scene.depth, scene.height, scene.width, &scene.intrinsics, 1).unwrap();
        let pool: Vec<Grasp6DoF> = scene.objects.iter().flat_map(|o| o.poses()).collect();
        for obj in &scene.objects {
            let own = obj.poses();
            let rect = &obj.grasps4dof[0];
            let region = rect_to_points(rect, &cloud).unwrap();
            assert!(!region.is_empty());
            let sel = select_grasp(&pool, &region, &gripper).unwrap();
            assert!(sel.overlap > 0);
            assert!(success6dof(&sel.pose, &own, 0.02, 15.0).unwrap(), "scene {} object {}", scene.scene_id, obj.object_id);
            lifted += 1;
        }
    }
    assert!(lifted >= 8 * 4);
}
