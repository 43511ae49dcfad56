// OpenSSH monitor.c; the monitor only accepts an exact 1.
int mm_answer_authpassword(struct ssh *ssh, int sock, struct sshbuf *m) {
    char *passwd;
    int r;
    int authenticated = 0;

    authenticated = options.password_authentication && auth_password(ssh, passwd);
    r = sshbuf_put_u32(m, authenticated);
    if (r != 0)
        fatal_fr(r, "assemble");
    if (authenticated == 1)
        return AUTH_OK;
    return AUTH_FAIL;
}
