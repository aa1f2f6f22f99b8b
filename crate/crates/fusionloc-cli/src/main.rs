fn main() {
    println!("fusionloc cli placeholder");
}
