fn main() {
    use ctxhtr_core::corpus::*;
    let cfg = GeneratorConfig::default();
    let profiles = profiles_for_config(&cfg).unwrap();
    // find a test writer and print its idiosyncratic chars
    for (p, s) in &profiles {
        if *s == Split::Test {
            let hot: Vec<(char, f32)> = p.variant_map.iter().filter(|(_, v)| v[0] > 0.5).map(|(c, v)| (*c, v[0])).collect();
            println!("{}: slant={:.2} width={:.2} jitter={:.2} idio={:?}", p.writer_id, p.slant, p.stroke_width, p.jitter, hot);
        }
    }
    let printed = WriterProfile::printed();
    let img = render_line("the quick brown fox jumps over a lazy dog", &printed, 32, 1).unwrap();
    write_pgm(std::path::Path::new("/tmp/printed.pgm"), &img).unwrap();
    let (p0, _) = profiles.iter().find(|(_, s)| *s == Split::Test).unwrap().clone();
    let img2 = render_line("the quick brown fox jumps over a lazy dog", &p0, 32, 2).unwrap();
    write_pgm(std::path::Path::new("/tmp/writer.pgm"), &img2).unwrap();
    // render the idio chars isolated: canonical vs writer
    let hot: Vec<char> = p0.variant_map.iter().filter(|(_, v)| v[0] > 0.5).map(|(c, _)| *c).collect();
    let text: String = hot.iter().flat_map(|c| [*c, ' ']).collect();
    let img3 = render_line(text.trim_end(), &printed, 32, 3).unwrap();
    write_pgm(std::path::Path::new("/tmp/idio_canon.pgm"), &img3).unwrap();
    let img4 = render_line(text.trim_end(), &p0, 32, 3).unwrap();
    write_pgm(std::path::Path::new("/tmp/idio_writer.pgm"), &img4).unwrap();
}
