int check_tight(const char *a, const char *b) {
    int matched = 0;
    matched = compare_passwords(a, b);
    if (matched == 1)
        return MATCH;
    else
        return NO_MATCH;
}
