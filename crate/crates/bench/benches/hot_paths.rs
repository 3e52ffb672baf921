use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use langgrasp_bench::{random_rects, scene, scene_sized_entries};
use langgrasp_core::autonet::{forward, init_params, loss_and_grads, random_sample, ArchConfig, ForwardMode, LossConfig};
use langgrasp_core::geometry3d::{deproject, rect_to_points, sample_candidates, select_grasp};
use langgrasp_core::grasp_maps::{decode_topk, rasterize_gt};
use langgrasp_core::io_formats::{read_container, write_container};
use langgrasp_core::metrics::rect_iou;
use langgrasp_core::synthgen::{gen_scene, SceneConfig};
use langgrasp_core::GripperModel;

fn metrics(c: &mut Criterion) {
    let rects = random_rects(64, 96.0, 1);
    c.bench_function("rect_iou/64x64_pairs", |b| {
        b.iter(|| {
            let mut s = 0.0;
            for a in &rects {
                for r in &rects {
                    s += rect_iou(black_box(a), black_box(r)).unwrap();
                }
            }
            s
        })
    });
}

fn grasp_maps(c: &mut Criterion) {
    let mut group = c.benchmark_group("grasp_maps");
    for n in [1usize, 16, 64] {
        let rects = random_rects(n, 96.0, 2);
        group.bench_with_input(BenchmarkId::new("rasterize_gt_96", n), &rects, |b, rects| {
            b.iter(|| rasterize_gt(black_box(rects), 96, 96).unwrap())
        });
    }
    let maps = rasterize_gt(&random_rects(64, 96.0, 3), 96, 96).unwrap();
    group.bench_function("decode_topk_96/k5_r3", |b| b.iter(|| decode_topk(black_box(&maps), 5, 3)));
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let arch = ArchConfig::new(64);
    let params = init_params(&arch, 0).unwrap();
    let sample = random_sample(&arch, 96, 6, 1).unwrap();
    group.bench_function("forward_96", |b| b.iter(|| forward(&arch, &params, black_box(&sample.image), &sample.tokens).unwrap()));
    let loss = LossConfig::default();
    for (name, mode) in [("mask_only", ForwardMode::MASK_ONLY), ("full", ForwardMode::FULL)] {
        group.bench_function(BenchmarkId::new("loss_and_grads_96", name), |b| {
            b.iter(|| loss_and_grads(&arch, &params, black_box(&sample), &loss, mode).unwrap())
        });
    }
    group.finish();
}

fn lifting(c: &mut Criterion) {
    let mut group = c.benchmark_group("geometry3d");
    let s = scene(5, 96, 10);
    let gripper = GripperModel::default();
    group.bench_function("deproject_96", |b| {
        b.iter(|| deproject(black_box(&s.depth), s.height, s.width, &s.intrinsics, 1).unwrap())
    });
    let cloud = deproject(&s.depth, s.height, s.width, &s.intrinsics, 1).unwrap();
    let region = rect_to_points(&s.objects[0].grasps4dof[0], &cloud).unwrap();
    group.bench_function("sample_candidates/64", |b| b.iter(|| sample_candidates(black_box(&region), 64, &gripper, 0).unwrap()));
    let pool = sample_candidates(&region, 64, &gripper, 0).unwrap();
    group.bench_function("select_grasp/64", |b| b.iter(|| select_grasp(black_box(&pool), &region, &gripper).unwrap()));
    group.finish();
}

fn data(c: &mut Criterion) {
    let mut group = c.benchmark_group("data");
    let entries = scene_sized_entries(96, 4);
    let bytes = write_container(&entries).unwrap();
    group.bench_function("write_container/scene_96", |b| b.iter(|| write_container(black_box(&entries)).unwrap()));
    group.bench_function("read_container/scene_96", |b| b.iter(|| read_container(black_box(&bytes)).unwrap()));
    let seed = scene(6, 96, 20).seed;
    group.bench_function("gen_scene/6_objects_96", |b| b.iter(|| gen_scene(black_box(seed), &SceneConfig::new(6, 96)).unwrap()));
    group.finish();
}

criterion_group!(benches, metrics, grasp_maps, network, lifting, data);
criterion_main!(benches);
