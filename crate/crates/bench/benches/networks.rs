use criterion::{criterion_group, criterion_main, Criterion};
use hkd_bench::{fixture, labels};
use hkd_core::distill::ObjectiveConfig;
use hkd_core::nn::Mode;
use hkd_core::rng;
use hkd_core::train::{student_update, teacher_targets, Adam, AdamConfig, OptimizerKind};
use hkd_core::{Network, Student, StudentConfig, Teacher, TeacherConfig};

fn networks() -> (Teacher, Student) {
    let teacher = Teacher::new(
        2,
        TeacherConfig::default(),
        &mut rng::substream(0, rng::DOMAIN_INIT_TEACHER, &[]),
    )
    .unwrap();
    let student = Student::new(
        2,
        StudentConfig::default(),
        &mut rng::substream(0, rng::DOMAIN_INIT_STUDENT, &[]),
    )
    .unwrap();
    (teacher, student)
}

fn inference(c: &mut Criterion) {
    let (teacher, student) = networks();
    let x = fixture(&[1, 3, 224, 224]);
    let mut group = c.benchmark_group("inference_224");
    group.sample_size(10);
    group.bench_function("student", |b| b.iter(|| student.predict(&x).unwrap()));
    group.bench_function("teacher", |b| b.iter(|| teacher.predict(&x).unwrap()));
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (teacher, mut student) = networks();
    let x = fixture(&[8, 3, 64, 64]);
    let batch = hkd_core::data::SampleBatch {
        images: x.clone(),
        labels: labels(8, 2),
        indices: (0..8).collect(),
    };
    let targets = teacher_targets(&teacher, &x).unwrap();
    let mut opt = Adam::new(AdamConfig::new(OptimizerKind::Adam, 1e-4, 0.0), student.params()).unwrap();
    let objective = ObjectiveConfig::default();
    let mut group = c.benchmark_group("train_step_64");
    group.sample_size(10);
    group.bench_function("student_update_batch8", |b| {
        b.iter(|| student_update(&mut student, &mut opt, &batch, &targets, &objective).unwrap())
    });
    group.bench_function("student_forward_train_batch8", |b| {
        b.iter(|| student.run(&x, Mode::Train, true).unwrap())
    });
    group.finish();
}

criterion_group!(benches, inference, train_step);
criterion_main!(benches);
